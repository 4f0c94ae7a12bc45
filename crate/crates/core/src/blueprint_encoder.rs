//! Blueprint encoder: a tiny four-layer conv net that turns the line-art
//! condition into a feature map added onto the denoiser input.
//!
//! The stack downsamples by exactly 8x (512x512 line art -> 64x64 features)
//! and ends in a zero-initialized 1x1 projection, so a fresh model is
//! completely blind to the blueprint until training opens the pathway.

use crate::config::BlueprintEncoderConfig;
use crate::error::{Error, Result};
use crate::numerics::tensor::{Scalar, Tensor};
use crate::numerics::{Rng, Tape, Var};
use crate::params::{conv_on, init_conv, init_conv_zero, ParamStore, VarMap};

/// Kernel sizes of the four body layers. The stride-1 tail layer uses a 3x3
/// kernel: a 4x4 kernel at stride 1 cannot keep the spatial extent with
/// symmetric padding, and the 8x contract wins.
const KERNELS: [usize; 4] = [4, 4, 4, 3];
const STRIDES: [usize; 4] = [2, 2, 2, 1];
const PADS: [usize; 4] = [1, 1, 1, 1];

pub const NAMESPACE: &str = "blueprint_encoder";

/// Allocate parameters under `blueprint_encoder.*`; `out_channels` is the
/// denoiser input channel count the projection maps onto.
pub fn init_params<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut Rng,
    cfg: &BlueprintEncoderConfig,
    out_channels: usize,
) {
    let mut cin = 1;
    for (i, &cout) in cfg.channels.iter().enumerate() {
        init_conv(
            store,
            rng,
            &format!("{NAMESPACE}.conv{}", i + 1),
            cout,
            cin,
            KERNELS[i],
            KERNELS[i],
        );
        cin = cout;
    }
    init_conv_zero(store, &format!("{NAMESPACE}.proj"), out_channels, cin, 1, 1);
}

/// Forward pass on a tape.
pub fn encode_on<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &VarMap,
    cfg: &BlueprintEncoderConfig,
    cb: Var,
) -> Result<Var> {
    let shape = tape.shape(cb).to_vec();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(Error::shape(format!(
            "blueprint must be 1xHxW, got {shape:?}"
        )));
    }
    if shape[1] % 8 != 0 || shape[2] % 8 != 0 {
        return Err(Error::shape(format!(
            "blueprint resolution {}x{} not divisible by 8",
            shape[1], shape[2]
        )));
    }
    let mut h = cb;
    for i in 0..cfg.channels.len() {
        h = conv_on(
            tape,
            vars,
            &format!("{NAMESPACE}.conv{}", i + 1),
            h,
            STRIDES[i],
            PADS[i],
        )?;
        h = tape.relu(h)?;
    }
    conv_on(tape, vars, &format!("{NAMESPACE}.proj"), h, 1, 0)
}

/// Map a blueprint image to its fused feature map; output spatial size is
/// exactly 1/8 of the input.
pub fn encode_blueprint<T: Scalar>(
    cb: &Tensor<T>,
    params: &ParamStore<T>,
    cfg: &BlueprintEncoderConfig,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let cb_var = tape.leaf(cb.clone());
    let out = encode_on(&mut tape, &vars, cfg, cb_var)?;
    Ok(tape.value(out).clone())
}

/// Elementwise fusion of the noised latent and the blueprint features.
pub fn fuse_blueprint<T: Scalar>(zt: &Tensor<T>, cbp: &Tensor<T>) -> Result<Tensor<T>> {
    if zt.shape() != cbp.shape() {
        return Err(Error::shape(format!(
            "fuse_blueprint: {:?} vs {:?}",
            zt.shape(),
            cbp.shape()
        )));
    }
    let out = zt.add(cbp)?;
    out.ensure_finite("fuse_blueprint")?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::BlueprintEncoderConfig;

    fn fresh_params(out_channels: usize) -> (ParamStore<f32>, BlueprintEncoderConfig) {
        let cfg = BlueprintEncoderConfig::default();
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        init_params(&mut store, &mut rng, &cfg, out_channels);
        (store, cfg)
    }

    #[test]
    fn maps_512_to_64() {
        let (store, cfg) = fresh_params(4);
        let cb = Tensor::<f32>::zeros(&[1, 512, 512]);
        let out = encode_blueprint(&cb, &store, &cfg).unwrap();
        assert_eq!(out.shape(), &[4, 64, 64]);
    }

    #[test]
    fn maps_32_to_4() {
        let (store, cfg) = fresh_params(3);
        let cb = Tensor::<f32>::zeros(&[1, 32, 32]);
        let out = encode_blueprint(&cb, &store, &cfg).unwrap();
        assert_eq!(out.shape(), &[3, 4, 4]);
    }

    #[test]
    fn eight_x_factor_across_resolutions() {
        let (store, cfg) = fresh_params(3);
        for r in [16usize, 24, 64, 128] {
            let cb = Tensor::<f32>::zeros(&[1, r, r]);
            let out = encode_blueprint(&cb, &store, &cfg).unwrap();
            assert_eq!(out.shape(), &[3, r / 8, r / 8], "resolution {r}");
        }
    }

    #[test]
    fn non_divisible_resolution_is_shape_error() {
        let (store, cfg) = fresh_params(3);
        let cb = Tensor::<f32>::zeros(&[1, 20, 20]);
        assert!(matches!(
            encode_blueprint(&cb, &store, &cfg),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_init_projection_silences_any_input() {
        let (store, cfg) = fresh_params(3);
        let mut rng = Rng::new(9);
        let cb = rng.uniform_tensor::<f32>(&[1, 32, 32], 0.0, 1.0);
        let out = encode_blueprint(&cb, &store, &cfg).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_finite_for_unit_interval_inputs() {
        let (mut store, cfg) = fresh_params(3);
        // randomize the projection so the body output actually reaches the top
        let mut rng = Rng::new(5);
        let proj = store.get_mut("blueprint_encoder.proj.weight").unwrap();
        for v in proj.data_mut() {
            *v = rng.normal() as f32 * 0.1;
        }
        let cb = rng.uniform_tensor::<f32>(&[1, 32, 32], 0.0, 1.0);
        let out = encode_blueprint(&cb, &store, &cfg).unwrap();
        out.ensure_finite("test").unwrap();
        assert!(out.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn fuse_trivials_and_oracle() {
        let mut rng = Rng::new(3);
        let zt = rng.normal_tensor::<f32>(&[2, 4, 4]);
        let zeros = Tensor::zeros(&[2, 4, 4]);
        assert_eq!(fuse_blueprint(&zt, &zeros).unwrap().data(), zt.data());
        assert_eq!(fuse_blueprint(&zeros, &zt).unwrap().data(), zt.data());

        let cbp = rng.normal_tensor::<f32>(&[2, 4, 4]);
        let fused = fuse_blueprint(&zt, &cbp).unwrap();
        for i in 0..fused.numel() {
            assert_eq!(fused.data()[i], zt.data()[i] + cbp.data()[i]);
        }

        let bad = Tensor::<f32>::zeros(&[2, 4, 5]);
        assert!(matches!(fuse_blueprint(&zt, &bad), Err(Error::Shape(_))));
    }
}
