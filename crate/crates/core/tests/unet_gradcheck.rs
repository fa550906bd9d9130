use poseview::diffusion::gradcheck::check_unet_gradients;
use poseview::diffusion::UNetConfig;

#[test]
fn tiny_unet_gradients_match_finite_differences() {
    let report = check_unet_gradients(UNetConfig::tiny(3), 6, 17).unwrap();
    for g in &report.groups {
        assert!(g.checked > 0);
        assert!(
            g.max_rel_error <= 1e-3,
            "{}: {:.3e}",
            g.name,
            g.max_rel_error
        );
    }
}
