pub mod model_checks;
