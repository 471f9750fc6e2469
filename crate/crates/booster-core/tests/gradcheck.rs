//! One test per registered gradient check, so failures name the primitive.

use booster_core::verify::{run_gradcheck, GRADCHECK_NAMES, GRAD_TOL};

fn check(name: &str) {
    let err = run_gradcheck(name);
    assert!(err < GRAD_TOL, "{name}: worst rel err {err:.3e} exceeds {GRAD_TOL:e}");
}

macro_rules! gradchecks {
    ($($name:ident),* $(,)?) => {
        $(
            #[test]
            fn $name() {
                check(stringify!($name));
            }
        )*
    };
}

gradchecks!(
    relu,
    tanh,
    clamp,
    add,
    sub,
    mul,
    mul_aliased,
    scale,
    add_scalar,
    sum,
    mean,
    conv2d_x,
    conv2d_kernel,
    conv2d_strided,
    bias_channel_x,
    bias_channel_b,
    maxpool2d,
    affine_x,
    affine_w,
    affine_b,
    softmax_ce_mean,
    softmax_ce_sum,
    kl_left,
    kl_right,
    cw_margin,
    inject_x,
    inject_frame,
    model_input_gradient,
);

#[test]
fn every_registered_check_has_a_test() {
    assert_eq!(GRADCHECK_NAMES.len(), 28);
}
