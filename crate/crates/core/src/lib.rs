pub mod ndgrad;
pub mod model;
pub mod synth;
pub mod probe;
pub mod calib_uac;
pub mod calib_dac;
pub mod evalkit;
pub mod pipeline;
