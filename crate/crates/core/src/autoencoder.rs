//! Optional latent mode: a small convolutional autoencoder that projects
//! images to an 8x-downsampled latent grid and back. Pixel mode bypasses it
//! entirely (identity encode/decode, three channels); the diffusion pipeline
//! is identical in both modes.

use crate::config::AutoencoderConfig;
use crate::error::{Error, Result};
use crate::numerics::tensor::{Scalar, Tensor};
use crate::numerics::{Rng, Tape, Var};
use crate::params::{
    conv_on, conv_transpose_on, init_conv, init_conv_transpose, ParamStore, VarMap,
};

pub const NAMESPACE: &str = "autoencoder";

pub fn init_params<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, cfg: &AutoencoderConfig) {
    let w = cfg.base_width;
    init_conv(store, rng, &format!("{NAMESPACE}.enc1"), w, 3, 4, 4);
    init_conv(store, rng, &format!("{NAMESPACE}.enc2"), 2 * w, w, 4, 4);
    init_conv(store, rng, &format!("{NAMESPACE}.enc3"), 4 * w, 2 * w, 4, 4);
    init_conv(store, rng, &format!("{NAMESPACE}.mu"), cfg.latent_channels, 4 * w, 3, 3);
    if cfg.kl_weight > 0.0 {
        init_conv(
            store,
            rng,
            &format!("{NAMESPACE}.logvar"),
            cfg.latent_channels,
            4 * w,
            3,
            3,
        );
    }
    init_conv(store, rng, &format!("{NAMESPACE}.dec_in"), 4 * w, cfg.latent_channels, 3, 3);
    init_conv_transpose(store, rng, &format!("{NAMESPACE}.dec1"), 4 * w, 2 * w, 4, 4);
    init_conv_transpose(store, rng, &format!("{NAMESPACE}.dec2"), 2 * w, w, 4, 4);
    init_conv_transpose(store, rng, &format!("{NAMESPACE}.dec3"), w, w, 4, 4);
    init_conv(store, rng, &format!("{NAMESPACE}.dec_out"), 3, w, 3, 3);
}

fn encoder_trunk_on<T: Scalar>(tape: &mut Tape<T>, vars: &VarMap, x: Var) -> Result<Var> {
    let h = conv_on(tape, vars, &format!("{NAMESPACE}.enc1"), x, 2, 1)?;
    let h = tape.relu(h)?;
    let h = conv_on(tape, vars, &format!("{NAMESPACE}.enc2"), h, 2, 1)?;
    let h = tape.relu(h)?;
    let h = conv_on(tape, vars, &format!("{NAMESPACE}.enc3"), h, 2, 1)?;
    tape.relu(h)
}

/// Encoder graph; returns the posterior mode (the mu head).
pub fn encode_on<T: Scalar>(tape: &mut Tape<T>, vars: &VarMap, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 || shape[0] != 3 || shape[1] % 8 != 0 || shape[2] % 8 != 0 {
        return Err(Error::shape(format!(
            "autoencoder input must be 3xHxW with H,W divisible by 8, got {shape:?}"
        )));
    }
    let h = encoder_trunk_on(tape, vars, x)?;
    conv_on(tape, vars, &format!("{NAMESPACE}.mu"), h, 1, 1)
}

/// Decoder graph; output is unclamped (training needs the raw values).
pub fn decode_on<T: Scalar>(tape: &mut Tape<T>, vars: &VarMap, z: Var) -> Result<Var> {
    if tape.shape(z).len() != 3 {
        return Err(Error::shape(format!(
            "autoencoder latent must be CxHxW, got {:?}",
            tape.shape(z)
        )));
    }
    let h = conv_on(tape, vars, &format!("{NAMESPACE}.dec_in"), z, 1, 1)?;
    let h = tape.relu(h)?;
    let h = conv_transpose_on(tape, vars, &format!("{NAMESPACE}.dec1"), h, 2, 1)?;
    let h = tape.relu(h)?;
    let h = conv_transpose_on(tape, vars, &format!("{NAMESPACE}.dec2"), h, 2, 1)?;
    let h = tape.relu(h)?;
    let h = conv_transpose_on(tape, vars, &format!("{NAMESPACE}.dec3"), h, 2, 1)?;
    let h = tape.relu(h)?;
    conv_on(tape, vars, &format!("{NAMESPACE}.dec_out"), h, 1, 1)
}

/// Deterministic latent of an image in [0,1].
pub fn encode_image<T: Scalar>(x: &Tensor<T>, params: &ParamStore<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let xv = tape.leaf(x.clone());
    let z = encode_on(&mut tape, &vars, xv)?;
    Ok(tape.value(z).clone())
}

/// Image in [0,1] from a latent; clamped at the boundary.
pub fn decode_latent<T: Scalar>(z: &Tensor<T>, params: &ParamStore<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let zv = tape.leaf(z.clone());
    let y = decode_on(&mut tape, &vars, zv)?;
    let img = tape.value(y).map(|v| {
        if v < T::zero() {
            T::zero()
        } else if v > T::one() {
            T::one()
        } else {
            v
        }
    });
    img.ensure_finite("decode_latent")?;
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (ParamStore<f32>, AutoencoderConfig) {
        let cfg = AutoencoderConfig {
            base_width: 8,
            latent_channels: 4,
            kl_weight: 0.0,
        };
        let mut store = ParamStore::new();
        let mut rng = Rng::new(13);
        init_params(&mut store, &mut rng, &cfg);
        (store, cfg)
    }

    #[test]
    fn shape_contract_32_to_4_and_back() {
        let (store, cfg) = setup();
        let mut rng = Rng::new(14);
        let x = rng.uniform_tensor::<f32>(&[3, 32, 32], 0.0, 1.0);
        let z = encode_image(&x, &store).unwrap();
        assert_eq!(z.shape(), &[cfg.latent_channels, 4, 4]);
        let y = decode_latent(&z, &store).unwrap();
        assert_eq!(y.shape(), &[3, 32, 32]);
        assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn encode_is_deterministic() {
        let (store, _) = setup();
        let mut rng = Rng::new(15);
        let x = rng.uniform_tensor::<f32>(&[3, 16, 16], 0.0, 1.0);
        let a = encode_image(&x, &store).unwrap();
        let b = encode_image(&x, &store).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn bad_input_shape_rejected() {
        let (store, _) = setup();
        let x = Tensor::<f32>::zeros(&[3, 20, 20]);
        assert!(matches!(encode_image(&x, &store), Err(Error::Shape(_))));
    }
}
