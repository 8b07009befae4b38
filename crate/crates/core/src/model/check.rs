//! Float64 gradient checks of the network's building blocks on tiny shapes.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::degrade::gen_clean_scene;
use crate::diff::{grad_check, GradCheckOptions, GradCheckReport, Graph, ParameterStore, Tensor, TokenAxis, Var};
use crate::episodes::Pair;
use crate::error::{Error, Result};

use super::{stack_images, MatchMode, ModelConfig, Network};

/// Tolerance on the max relative error of every block.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradBlock {
    Encoder,
    Spatial,
    Channel,
    Decoder,
    Model,
}

impl GradBlock {
    pub const ALL: [GradBlock; 5] = [
        GradBlock::Encoder,
        GradBlock::Spatial,
        GradBlock::Channel,
        GradBlock::Decoder,
        GradBlock::Model,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GradBlock::Encoder => "encoder",
            GradBlock::Spatial => "spatial",
            GradBlock::Channel => "channel",
            GradBlock::Decoder => "decoder",
            GradBlock::Model => "model",
        }
    }
}

impl fmt::Display for GradBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GradBlock {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "gradient-check block",
                name: s.into(),
            })
    }
}

/// The tiny network: 8x8 input, widths [4, 8], one head at the first level.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        levels: 2,
        widths: alloc::vec![4, 8],
        heads: alloc::vec![1, 2],
        input_size: 8,
        match_mode: MatchMode::Both,
        ..ModelConfig::desk()
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// Scalar `sum(x * r)` for a fixed random `r`, so every output coordinate matters.
fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = random_tensor(&mut rng, g.shape(x));
    let r = g.input(r);
    let m = g.mul(x, r)?;
    Ok(g.sum_all(m))
}

fn perturbed_store(net: &Network, seed: u64, prefixes: &[&str]) -> Result<ParameterStore<f64>> {
    let mut s = net.init_params::<f64>(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in s.iter_mut() {
        for v in p.values.iter_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
    s.set_trainable_where(|p| prefixes.iter().any(|pre| p.name.starts_with(pre)));
    Ok(s)
}

/// Central-difference check (eps 1e-5) of one block in float64.
pub fn grad_check_block(block: GradBlock, seed: u64) -> Result<GradCheckReport> {
    let net = Network::new(tiny_config())?;
    let opts = GradCheckOptions {
        seed,
        ..GradCheckOptions::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match block {
        GradBlock::Encoder => {
            let mut s = perturbed_store(&net, seed, &["enc."])?;
            let x = random_tensor(&mut rng, &[1, 8, 8, 3]);
            grad_check(
                &mut s,
                |g, s| {
                    let xv = g.input(x.clone());
                    let feats = net.encode(g, s, xv)?;
                    let mut total: Option<Var> = None;
                    for (i, f) in feats.into_iter().enumerate() {
                        let p = project(g, f, seed + i as u64)?;
                        total = Some(match total {
                            Some(t) => g.add(t, p)?,
                            None => p,
                        });
                    }
                    Ok(total.expect("at least one level"))
                },
                opts,
            )
        }
        GradBlock::Spatial | GradBlock::Channel => {
            let (axis, prefix) = if block == GradBlock::Spatial {
                (TokenAxis::Spatial, "match.l0.spatial")
            } else {
                (TokenAxis::Channel, "match.l0.channel")
            };
            let mut s = perturbed_store(&net, seed, &[prefix])?;
            let q = random_tensor(&mut rng, &[1, 2, 2, 4]);
            let k = random_tensor(&mut rng, &[1, 2, 2, 4]);
            let v = random_tensor(&mut rng, &[1, 2, 2, 4]);
            grad_check(
                &mut s,
                |g, s| {
                    let (qv, kv, vv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
                    let (phi, _) = Network::match_branch(g, s, prefix, qv, kv, vv, axis, 1)?;
                    project(g, phi, seed)
                },
                opts,
            )
        }
        GradBlock::Decoder => {
            let mut s = perturbed_store(&net, seed, &["dec."])?;
            let phis: Vec<_> = (0..2)
                .map(|l| {
                    let n = net.config().level_size(l);
                    random_tensor(&mut rng, &[1, n, n, net.config().widths[l]])
                })
                .collect();
            let xq = random_tensor(&mut rng, &[1, 8, 8, 3]);
            grad_check(
                &mut s,
                |g, s| {
                    let pv: Vec<_> = phis.iter().map(|p| g.input(p.clone())).collect();
                    let xv = g.input(xq.clone());
                    let (_, unclipped, _) = net.decode(g, s, &pv, xv)?;
                    project(g, unclipped, seed)
                },
                opts,
            )
        }
        GradBlock::Model => {
            let mut s = perturbed_store(&net, seed, &[""])?;
            let q = gen_clean_scene(seed.wrapping_add(1), 8, 8);
            let p = Pair::new(
                "s",
                gen_clean_scene(seed.wrapping_add(2), 8, 8),
                gen_clean_scene(seed.wrapping_add(3), 8, 8),
                "c",
            )?;
            let (sx, st) = net.support_tensors::<f64>(&[p])?;
            let xq = stack_images::<f64, f32>(&[&q])?;
            grad_check(
                &mut s,
                |g, s| {
                    let xv = g.input(xq.clone());
                    let (a, b) = (g.input(sx.clone()), g.input(st.clone()));
                    let sv = net.encode_supports(g, s, a, b)?;
                    let f = net.forward(g, s, xv, &sv)?;
                    project(g, f.unclipped, seed)
                },
                opts,
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_block_passes() {
        for b in GradBlock::ALL {
            let r = grad_check_block(b, 0).unwrap();
            assert!(r.checked > 0, "{b}");
            assert!(r.max_rel_error < GRAD_CHECK_TOLERANCE, "{b}: {}", r.max_rel_error);
        }
    }

    #[test]
    fn block_names_round_trip() {
        for b in GradBlock::ALL {
            assert_eq!(b.as_str().parse::<GradBlock>().unwrap(), b);
        }
        assert!("attention".parse::<GradBlock>().is_err());
    }
}
