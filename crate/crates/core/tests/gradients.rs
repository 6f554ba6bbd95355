mod common;

use common::gradcheck::{detector_gradient_check, unet_gradient_check};

#[test]
fn denoising_loss_gradient_matches_central_differences() {
    let (err, n) = unet_gradient_check(10);
    assert!(n <= 1000, "{n} parameters");
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn detection_loss_gradient_matches_central_differences() {
    let (err, n) = detector_gradient_check(10);
    assert!(n <= 5000, "{n} parameters");
    assert!(err < 1e-3, "relative error {err}");
}
