pub mod config;
pub mod dynamics;
pub mod estimator;
pub mod frames;
pub mod motionlib;
pub mod planner;
pub mod output;
pub mod predictor;
pub mod simulator;
