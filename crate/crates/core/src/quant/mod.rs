//! Symmetric integer quantization: calibration, kernels and whole-model conversion.

pub mod kernel;
pub mod kl;
pub mod model;
pub mod params;

pub use kernel::{
    check_conv_accumulator, dequantize_tensor, qconv2d_int, qlinear_int, quantize_tensor,
    quantize_value, QOperand,
};
pub use kl::{calibrate_kl, calibrate_kl_weights, kl_threshold, KlThreshold, MagnitudeHistogram};
pub use params::{calibrate_maxabs, qmax, Granularity, QuantParams};

pub use model::{
    calibrate_activations, quantize_model, quantize_model_with_scales, ActivationScales,
    CalibrationMethod, QuantizedModel,
};
