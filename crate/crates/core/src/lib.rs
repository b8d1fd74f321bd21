pub mod integrands;
pub mod numerics;
pub mod targets;
pub mod steinnet;
pub mod training;
pub mod laplace;
pub mod baselines;
pub mod samplers;
pub mod goodwin;
pub mod bench;
