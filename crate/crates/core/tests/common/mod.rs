//! Gradient-check cases shared by the gradcheck and acceptance targets.
#![allow(dead_code)]

use detailclip::fusion::{batch_loss, FusionConfig, FusionModel, FusionSample};
use detailclip::tensor::check::{gradcheck, gradcheck_params};
use detailclip::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * d);
    for _ in 0..rows {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.extend(v.iter().map(|x| x / n));
    }
    out
}

/// Max relative error of every op case for one seed, by op name.
pub fn op_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut check = |name: &'static str, inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> detailclip::tensor::Result<Var>| {
        let r = gradcheck(inputs, f, H).unwrap();
        out.push((name, r.max_rel_err));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    let w = rand_tensor(&mut rng, &[3, 4]);
    check("matmul", &[a.clone(), b.clone()], &|g, v| {
        let c = g.matmul(v[0], v[1])?;
        let c2 = g.mul(c, c)?;
        Ok(g.sum(c2))
    });
    let a3 = rand_tensor(&mut rng, &[2, 3, 4]);
    let b3 = rand_tensor(&mut rng, &[2, 4, 3]);
    check("bmm", &[a3.clone(), b3], &|g, v| {
        let c = g.matmul(v[0], v[1])?;
        let c2 = g.mul(c, c)?;
        Ok(g.sum(c2))
    });
    check("shared matmul", &[a3.clone(), b.clone()], &|g, v| {
        let c = g.matmul(v[0], v[1])?;
        let c2 = g.mul(c, c)?;
        Ok(g.sum(c2))
    });
    let bias = rand_tensor(&mut rng, &[4]);
    check("add/add_bias/scale", &[a.clone(), w.clone(), bias], &|g, v| {
        let s = g.add(v[0], v[1])?;
        let s = g.add_bias(s, v[2])?;
        let s = g.scale(s, 0.7);
        let s2 = g.mul(s, s)?;
        Ok(g.sum(s2))
    });
    check("transpose/permute/reshape", &[a3.clone(), w.clone()], &|g, v| {
        let p = g.permute(v[0], &[2, 0, 1])?;
        let r = g.reshape(p, &[4, 6])?;
        let t = g.transpose(v[1])?;
        let r2 = g.reshape(t, &[6, 2])?;
        let m = g.matmul(r, r2)?;
        let m2 = g.mul(m, m)?;
        Ok(g.sum(m2))
    });
    check("concat", &[a.clone(), w.clone()], &|g, v| {
        let c = g.concat(&[v[0], v[1]], 1)?;
        let c = g.concat(&[c, c], 0)?;
        let c2 = g.mul(c, c)?;
        let c3 = g.mul(c2, c)?;
        Ok(g.sum(c3))
    });
    let weights = rand_tensor(&mut rng, &[2, 3, 4]);
    for axis in 0..3 {
        check("softmax", &[a3.clone(), weights.clone()], &|g, v| {
            let s = g.softmax(v[0], axis)?;
            let s = g.mul(s, v[1])?;
            Ok(g.sum(s))
        });
        check("l2_normalize", &[a3.clone(), weights.clone()], &|g, v| {
            let s = g.l2_normalize(v[0], axis, 1e-12)?;
            let s = g.mul(s, v[1])?;
            Ok(g.sum(s))
        });
        check("max", &[a3.clone(), weights.clone()], &|g, v| {
            let s = g.mul(v[0], v[1])?;
            let m = g.max(s, axis)?;
            let m2 = g.mul(m, m)?;
            Ok(g.sum(m2))
        });
    }
    let gamma = rand_tensor(&mut rng, &[4]);
    let beta = rand_tensor(&mut rng, &[4]);
    check("layer_norm", &[a3.clone(), gamma, beta, weights.clone()], &|g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-3)?;
        let y = g.mul(y, v[3])?;
        Ok(g.sum(y))
    });
    check("relu", &[a.clone(), w.clone()], &|g, v| {
        let y = g.relu(v[0]);
        let y = g.mul(y, v[1])?;
        Ok(g.sum(y))
    });
    check("mse", &[a.clone(), w.clone()], &|g, v| g.mse(v[0], v[1]));
    let q = rand_tensor(&mut rng, &[2, 3, 4]);
    let k = rand_tensor(&mut rng, &[2, 5, 4]);
    let val = rand_tensor(&mut rng, &[2, 5, 4]);
    check("attention", &[q, k, val, a3.clone()], &|g, v| {
        let o = g.scaled_dot_attention(v[0], v[1], v[2])?;
        let o = g.mul(o, v[3])?;
        Ok(g.sum(o))
    });
    out
}

/// Gradcheck of `samples` parameters through the fuser and the batch loss.
pub fn fusion_check(seed: u64, samples: usize) -> detailclip::tensor::check::GradCheck {
    let (b, p, d, t) = (3, 5, 16, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = FusionConfig { heads: 4, ff_dim: 32, use_box_encoding: true, ..FusionConfig::with_dim(d) };
    let model = FusionModel::new(cfg, seed).unwrap();
    let batch: Vec<FusionSample> = (0..b)
        .map(|i| {
            let patches = unit_rows(&mut rng, p, d);
            FusionSample {
                image_id: i as u64,
                image: patches[..d].to_vec(),
                patches,
                num_patches: p,
                boxes: (0..p).map(|j| [0.1 * j as f64, 0.0, 0.5 + 0.1 * j as f64, 0.5]).collect(),
            }
        })
        .collect();
    let texts = Tensor::new(vec![t, d], unit_rows(&mut rng, t, d)).unwrap();
    let refs: Vec<&FusionSample> = batch.iter().collect();
    gradcheck_params(
        &model.params,
        |g, store| {
            let m = FusionModel { config: model.config.clone(), params: store.clone() };
            let tv = g.constant(texts.clone());
            batch_loss(&m, g, &refs, tv, None).map_err(|e| match e {
                detailclip::fusion::FusionError::Tensor(t) => t,
                other => panic!("{other}"),
            })
        },
        H,
        samples,
        seed,
    )
    .unwrap()
}
