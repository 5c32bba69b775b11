pub mod bayesopt;
pub mod cmdp;
pub mod env;
pub mod interventions;
pub mod oracle;
pub mod rng;
pub mod sim;
pub mod student;
pub mod teacher;
