pub mod controller;
pub mod dynamics;
pub mod estimator;
pub mod experiment;
pub mod geodesic;
pub mod learner;
pub mod metric;
pub mod planner;
pub mod sim;
