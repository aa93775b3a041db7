//! Oracles and fixtures shared by the integration suites and the
//! acceptance run.
#![allow(dead_code)]

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sqlc::entropy::{quantization_noise, rate_bits, CdfTable, FREQ_TOTAL};
use sqlc::metrics::{MsSsimConfig, CS_FLOOR};
use sqlc::models::*;
use sqlc::bundle::ModelBundle;
use sqlc::codec::LearnedCodec;
use sqlc::container::{CodecId, Container};
use sqlc::data_io::read_image;
use sqlc::stain::{NormRanges, StainMatrix};
use sqlc::{Error, Tensor};
use sqlc_tensor::{grad_check, GradCheckConfig, GradCheckReport, Graph, TensorError, Var};

/// Random valid table: random support, random positive weights, tiny
/// escape probability.
pub fn random_table(rng: &mut impl Rng) -> CdfTable {
    let n = rng.gen_range(1..200);
    let min = rng.gen_range(-300..300);
    let mut probs: Vec<f64> = (0..n).map(|_| rng.gen::<f64>().powi(3) + 1e-9).collect();
    probs.push(rng.gen_range(0.0..0.01));
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    CdfTable::from_probabilities(min, &probs).unwrap()
}

pub fn random_case(seed: u64) -> (Vec<CdfTable>, Vec<usize>, Vec<i32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tables: Vec<CdfTable> = (0..rng.gen_range(1..4)).map(|_| random_table(&mut rng)).collect();
    let len = rng.gen_range(0..300);
    let channels: Vec<usize> = (0..len).map(|_| rng.gen_range(0..tables.len())).collect();
    let symbols = channels
        .iter()
        .map(|&c| {
            let t = &tables[c];
            match rng.gen_range(0..20) {
                0 => rng.gen_range(-32768..=32767),
                _ => rng.gen_range(t.min_value()..=t.max_value()),
            }
        })
        .collect();
    (tables, channels, symbols)
}

/// Skewed, single-symbol and full-width tables with sequences that hit
/// the extremes of the symbol range and the escape path.
pub fn extreme_coder_cases() -> (Vec<CdfTable>, Vec<(Vec<usize>, Vec<i32>)>) {
    // one frequency-1 symbol next to a huge one
    let skewed = CdfTable::new(0, vec![0, 1, FREQ_TOTAL - 1, FREQ_TOTAL]).unwrap();
    let single = CdfTable::new(-5, vec![0, FREQ_TOTAL - 1, FREQ_TOTAL]).unwrap();
    let wide = CdfTable::from_probabilities(-32768, &vec![1.0 / 65535.0; 65535]).unwrap();
    let cases = vec![
        (vec![0; 5000], vec![0; 5000]),
        (vec![0; 5000], vec![1; 5000]),
        (vec![1; 3000], vec![-5; 3000]),
        (vec![1; 64], (0..64).map(|i| if i % 2 == 0 { 32767 } else { -32768 }).collect()),
        (vec![2; 4], vec![-32768, 32765, 0, 32766]),
        (vec![0, 1, 2, 0, 1, 2], vec![1, 9, -32768, 0, -5, 100]),
    ];
    (vec![skewed, single, wide], cases)
}

/// I.i.d. draws from `table`, escape slot mapped to the first value past
/// the support.
pub fn sample_symbols(table: &CdfTable, n: usize, rng: &mut impl Rng) -> Vec<i32> {
    (0..n)
        .map(|_| {
            let slot = table.find(rng.gen_range(0..FREQ_TOTAL)).unwrap();
            if slot == table.escape_slot() {
                table.max_value() + 1
            } else {
                table.value_of(slot)
            }
        })
        .collect()
}

pub fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::<f64>::uniform(vec![c, h, w], 0.0, 1.0, &mut rng)
}

/// Plane as a row-major `Vec<Vec<f64>>`.
pub fn plane(t: &Tensor<f64>, c: usize) -> Vec<Vec<f64>> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    (0..h).map(|y| (0..w).map(|x| t.data()[c * h * w + y * w + x]).collect()).collect()
}

/// Straight loops over an explicitly built 2-D Gaussian window.
pub fn direct_stats(a: &[Vec<f64>], b: &[Vec<f64>]) -> (f64, f64) {
    let (win, sigma) = (11usize, 1.5f64);
    let mut k = vec![vec![0.0; win]; win];
    let mut total = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (h, w) = (a.len(), a[0].len());
    let (mut ssim_sum, mut cs_sum, mut n) = (0.0, 0.0, 0.0);
    for y in 0..=h - win {
        for x in 0..=w - win {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..win {
                for j in 0..win {
                    let wt = k[i][j] / total;
                    let (p, q) = (a[y + i][x + j], b[y + i][x + j]);
                    ma += wt * p;
                    mb += wt * q;
                    saa += wt * p * p;
                    sbb += wt * q * q;
                    sab += wt * p * q;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            let cs = (2.0 * cov + c2) / (va + vb + c2);
            let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
            ssim_sum += l * cs;
            cs_sum += cs;
            n += 1.0;
        }
    }
    (ssim_sum / n, cs_sum / n)
}

pub fn halve(p: &[Vec<f64>]) -> Vec<Vec<f64>> {
    (0..p.len() / 2)
        .map(|y| (0..p[0].len() / 2).map(|x| (p[2 * y][2 * x] + p[2 * y][2 * x + 1] + p[2 * y + 1][2 * x] + p[2 * y + 1][2 * x + 1]) / 4.0).collect())
        .collect()
}

pub fn direct_ms_ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let base = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
    let side = a.shape()[1].min(a.shape()[2]);
    let scales = (1..=5).rev().find(|s| side >= 11 << (s - 1)).unwrap();
    let total: f64 = base[..scales].iter().sum();
    let channels = a.shape()[0];
    let mut acc = 0.0;
    for c in 0..channels {
        let (mut pa, mut pb) = (plane(a, c), plane(b, c));
        let mut value = 1.0;
        for s in 0..scales {
            if s > 0 {
                pa = halve(&pa);
                pb = halve(&pb);
            }
            let (ssim, cs) = direct_stats(&pa, &pb);
            let term = if s + 1 == scales { ssim } else { cs };
            value *= term.max(CS_FLOOR).powf(base[s] / total);
        }
        acc += value;
    }
    acc / channels as f64
}

pub fn two_stain_pixels(rows: [[f64; 3]; 2], n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(3 * n);
    for _ in 0..n {
        let (a, b): (f64, f64) = (rng.gen_range(0.0..1.5), rng.gen_range(0.0..1.5));
        // a share of pixels carry mostly one stain
        let (a, b) = match rng.gen_range(0..4) {
            0 => (a, 0.02 * b),
            1 => (0.02 * a, b),
            _ => (a, b),
        };
        data.extend((0..3).map(|j| (a * rows[0][j] + b * rows[1][j]) as f32));
    }
    Tensor::new(vec![n, 3], data).unwrap()
}

pub fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.map(|x| x / n)
}

pub fn angle_deg(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dot: f64 = (0..3).map(|i| a[i] * b[i]).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees()
}


pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn image(shape: Vec<usize>, seed: u64) -> Tensor {
    Tensor::uniform(shape, 0.0, 1.0, &mut seeded(seed))
}

fn lift(e: sqlc::Error) -> TensorError {
    TensorError::Argument { op: "model", detail: e.to_string() }
}

/// Blend of `base` with noise, so the MS-SSIM of a reconstruction against
/// it stays well above the contrast-structure floor, where the loss is smooth.
pub fn correlated_target(base: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    let noise = image(base.shape().to_vec(), seed).cast::<f64>();
    Tensor::new(base.shape().to_vec(), base.data().iter().zip(noise.data()).map(|(b, n)| 0.8 * b + 0.2 * n).collect()).unwrap()
}

pub fn f64_params(named: Vec<(String, &Tensor)>) -> Vec<Tensor<f64>> {
    named.into_iter().map(|(_, t)| t.cast()).collect()
}

fn nicm_rd(g: &mut Graph<f64>, m: &NicmModel, p: &[Var], x: &Tensor<f64>, noise: &Tensor<f64>) -> Result<(Var, Var), TensorError> {
    let vars = NicmVars::from_vars(p.to_vec());
    let xv = g.constant(x.clone());
    let y = m.analyze(g, &vars, xv).map_err(lift)?;
    let nv = g.constant(noise.clone());
    let y_tilde = g.add(y, nv)?;
    let lik = m.entropy.likelihood(g, y_tilde, &vars.entropy).map_err(lift)?;
    let bits = rate_bits(g, lik);
    let x_hat = m.synthesize(g, &vars, y_tilde).map_err(lift)?;
    Ok((bits, x_hat))
}

fn initial_reconstruction(m: &NicmModel, x: &Tensor<f64>, noise: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::<f64>::new();
    let p: Vec<Var> = m.named_parameters().into_iter().map(|(_, t)| g.constant(t.cast())).collect();
    let (_, x_hat) = nicm_rd(&mut g, m, &p, x, noise).unwrap();
    g.value(x_hat).clone()
}

/// Finite-difference check of the rate-distortion loss over every NICM
/// parameter group. The step balances MS-SSIM roundoff (scaled by λ·255²)
/// against curvature.
pub fn rd_loss_grad_report() -> GradCheckReport {
    let m = NicmModel::new(3, 4, 3, &mut seeded(19));
    let x = image(vec![1, 3, 32, 32], 20).cast::<f64>();
    let noise = quantization_noise(&[1, 3, 2, 2], &mut seeded(21)).cast::<f64>();
    let target = correlated_target(&initial_reconstruction(&m, &x, &noise), 32);
    let cfg = MsSsimConfig::default();
    grad_check(
        &f64_params(m.named_parameters()),
        |g: &mut Graph<f64>, p| {
            let (bits, x_hat) = nicm_rd(g, &m, p, &x, &noise)?;
            let xv = g.constant(target.clone());
            Ok(rd_loss(g, xv, x_hat, bits, 0.01, 32 * 32, &cfg).map_err(lift)?.loss)
        },
        GradCheckConfig { max_samples_per_param: 6, step: 3e-4, ..Default::default() },
    )
    .unwrap()
}

/// Same for the SQLC finetune loss through a frozen stain encoder. The SE
/// decoder's leaky ReLUs need a small step; a small λ keeps the amplified
/// MS-SSIM roundoff below that step's resolution.
pub fn finetune_loss_grad_report() -> GradCheckReport {
    let se = SeModel::new(3, &mut seeded(22));
    let m = NicmModel::new(3, 4, 3, &mut seeded(23));
    let x = image(vec![1, 3, 32, 32], 24).cast::<f64>();
    let noise = quantization_noise(&[1, 3, 2, 2], &mut seeded(25)).cast::<f64>();
    let target = correlated_target(&initial_reconstruction(&m, &x, &noise), 33);
    let cfg = MsSsimConfig::default();
    grad_check(
        &f64_params(m.named_parameters()),
        |g: &mut Graph<f64>, p| {
            let sv = se.bind(g, false);
            let (bits, x_hat) = nicm_rd(g, &m, p, &x, &noise)?;
            let xv = g.constant(target.clone());
            let z_hat = se.decode(g, &sv, xv).map_err(lift)?;
            let z_hat2 = se.decode(g, &sv, x_hat).map_err(lift)?;
            let (terms, _) =
                sqlc_finetune_loss(g, xv, x_hat, z_hat, z_hat2, bits, 0.001, 1.0, 32 * 32, &cfg).map_err(lift)?;
            Ok(terms.loss)
        },
        GradCheckConfig { max_samples_per_param: 6, step: 1e-5, ..Default::default() },
    )
    .unwrap()
}

fn rand_t(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), lo, hi, rng)
}

fn signed_away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = rand_t(shape, 0.2, 1.0, rng);
    for v in t.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var, TensorError> {
    let w = rand_t(g.shape(out), -1.0, 1.0, &mut seeded(seed));
    let wv = g.constant(w);
    let p = g.mul(out, wv)?;
    Ok(g.sum(p))
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>>;

/// One finite-difference report per differentiable graph primitive, on
/// random small shapes drawn from `seed`.
pub fn primitive_grad_reports(seed: u64) -> Vec<(&'static str, GradCheckReport)> {
    let mut rng = seeded(seed);
    let a = rand_t(&[2, 3, 4], -1.0, 1.0, &mut rng);
    let b = rand_t(&[2, 3, 4], 0.5, 1.5, &mut rng);
    let pos = rand_t(&[3, 5], 0.3, 2.0, &mut rng);
    let any = rand_t(&[3, 5], -2.0, 2.0, &mut rng);
    let signed = signed_away_from_zero(&[3, 5], &mut rng);
    let x4 = rand_t(&[2, 3, 7, 6], -1.0, 1.0, &mut rng);
    let w3 = rand_t(&[4, 3, 3, 3], -0.5, 0.5, &mut rng);
    let w5t = rand_t(&[3, 2, 5, 5], -0.5, 0.5, &mut rng);
    let bias = rand_t(&[4], -0.5, 0.5, &mut rng);
    let g3 = rand_t(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
    let beta = rand_t(&[3], 0.5, 1.5, &mut rng);
    let gamma = rand_t(&[3, 3], 0.01, 0.3, &mut rng);
    let small = rand_t(&[2, 2, 5, 6], -1.0, 1.0, &mut rng);
    let other = rand_t(&[2, 3, 5, 6], -1.0, 1.0, &mut rng);

    let cases: Vec<(&'static str, Vec<Tensor<f64>>, Build)> = vec![
        ("add", vec![a.clone(), b.clone()], Box::new(|g, v| { let o = g.add(v[0], v[1])?; weighted_sum(g, o, 1) })),
        ("sub", vec![a.clone(), b.clone()], Box::new(|g, v| { let o = g.sub(v[0], v[1])?; weighted_sum(g, o, 2) })),
        ("mul", vec![a.clone(), b.clone()], Box::new(|g, v| { let o = g.mul(v[0], v[1])?; weighted_sum(g, o, 3) })),
        ("div", vec![a, b], Box::new(|g, v| { let o = g.div(v[0], v[1])?; weighted_sum(g, o, 4) })),
        ("sqrt", vec![pos.clone()], Box::new(|g, v| { let o = g.sqrt(v[0]); weighted_sum(g, o, 5) })),
        ("log", vec![pos], Box::new(|g, v| { let o = g.log(v[0]); weighted_sum(g, o, 6) })),
        ("exp", vec![any.clone()], Box::new(|g, v| { let o = g.exp(v[0]); weighted_sum(g, o, 7) })),
        ("square", vec![any.clone()], Box::new(|g, v| { let o = g.square(v[0]); weighted_sum(g, o, 8) })),
        ("sigmoid", vec![any.clone()], Box::new(|g, v| { let o = g.sigmoid(v[0]); weighted_sum(g, o, 9) })),
        ("softplus", vec![any.clone()], Box::new(|g, v| { let o = g.softplus(v[0]); weighted_sum(g, o, 10) })),
        ("leaky_relu", vec![signed.clone()], Box::new(|g, v| { let o = g.leaky_relu(v[0], 0.01); weighted_sum(g, o, 11) })),
        ("abs", vec![signed.clone()], Box::new(|g, v| { let o = g.abs(v[0]); weighted_sum(g, o, 12) })),
        ("clamp_min", vec![signed], Box::new(|g, v| { let o = g.clamp_min(v[0], 0.0); weighted_sum(g, o, 13) })),
        ("add_scalar/mul_scalar", vec![any], Box::new(|g, v| {
            let o = g.mul_scalar(v[0], -1.7);
            let o = g.add_scalar(o, 0.3);
            weighted_sum(g, o, 14)
        })),
        ("mean", vec![x4.clone()], Box::new(|g, v| { let o = g.square(v[0]); Ok(g.mean(o)) })),
        ("sum", vec![x4.clone()], Box::new(|g, v| { let o = g.exp(v[0]); Ok(g.sum(o)) })),
        ("mean_spatial", vec![x4.clone()], Box::new(|g, v| { let o = g.square(v[0]); let m = g.mean_spatial(o)?; weighted_sum(g, m, 15) })),
        ("conv2d/channel_bias", vec![x4.clone(), w3, bias], Box::new(|g, v| {
            let o = g.conv2d(v[0], v[1], 2, 1)?;
            let o = g.channel_bias(o, v[2])?;
            weighted_sum(g, o, 16)
        })),
        ("conv2d_transpose", vec![x4, w5t], Box::new(|g, v| { let o = g.conv2d_transpose(v[0], v[1], 2, 2, 1)?; weighted_sum(g, o, 18) })),
        ("gdn", vec![g3.clone(), beta.clone(), gamma.clone()], Box::new(|g, v| { let o = g.gdn(v[0], v[1], v[2], false)?; weighted_sum(g, o, 19) })),
        ("igdn", vec![g3, beta, gamma], Box::new(|g, v| { let o = g.gdn(v[0], v[1], v[2], true)?; weighted_sum(g, o, 19) })),
        ("avg_pool2", vec![small.clone()], Box::new(|g, v| { let o = g.avg_pool2(v[0])?; weighted_sum(g, o, 20) })),
        ("reflect_pad", vec![small.clone()], Box::new(|g, v| { let o = g.reflect_pad(v[0], 2, 3, 1, 4)?; weighted_sum(g, o, 21) })),
        ("crop", vec![small.clone()], Box::new(|g, v| { let o = g.crop(v[0], 1, 2, 3, 3)?; weighted_sum(g, o, 22) })),
        ("concat/slice/reshape", vec![small, other], Box::new(|g, v| {
            let c = g.concat_channels(&[v[0], v[1]])?;
            let s = g.slice_channels(c, 1, 3)?;
            let r = g.reshape(s, vec![6, 1, 5, 6])?;
            weighted_sum(g, r, 23)
        })),
    ];
    cases
        .into_iter()
        .map(|(name, params, build)| (name, grad_check(&params, build, GradCheckConfig::default()).unwrap()))
        .collect()
}

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn corpus_patch(path: &str) -> Tensor {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/corpus");
    read_image(&root.join(path)).unwrap()
}

pub fn tiny(codec: CodecId, quality: u8, seed: u64) -> LearnedCodec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (se, in_c) = match codec {
        CodecId::Nicm3 => (None, 3),
        CodecId::Nicm6 => (None, 6),
        CodecId::Sqlc => (Some(SeModel::new(3, &mut rng)), 3),
        CodecId::Jpeg => unreachable!(),
    };
    let nicm = NicmModel::new(in_c, 8, 6, &mut rng);
    LearnedCodec::new(codec, quality, se, nicm, NormRanges::default(), StainMatrix::ruifrok()).unwrap()
}

pub fn crop(t: &Tensor, h: usize, w: usize) -> Tensor {
    let [c, sh, sw] = *t.shape() else { panic!() };
    let mut out = Vec::new();
    for ch in 0..c {
        for y in 0..h {
            out.extend_from_slice(&t.data()[(ch * sh + y) * sw..(ch * sh + y) * sw + w]);
        }
    }
    Tensor::new(vec![c, h, w], out).unwrap()
}

pub fn golden_codec() -> LearnedCodec {
    tiny(CodecId::Nicm3, 3, 42)
}

pub fn load_golden() -> (LearnedCodec, Vec<u8>, Tensor) {
    let dir = fixtures();
    let bundle = ModelBundle::load(&dir.join("golden_nicm3.sqlm")).unwrap();
    let codec = LearnedCodec::from_bundle(&bundle).unwrap();
    let bytes = std::fs::read(dir.join("golden_nicm3.sqlc")).unwrap();
    let patch = read_image(&dir.join("golden_patch.png")).unwrap();
    (codec, bytes, patch)
}

/// Outcome of feeding a mutated container through parse and decode.
pub fn reject_kind(codec: &LearnedCodec, bytes: &[u8]) -> Option<String> {
    let err = match Container::from_bytes(bytes) {
        Err(e) => Error::Format(e),
        Ok(c) => match codec.decompress(&c) {
            Err(e) => e,
            Ok(_) => return None,
        },
    };
    Some(match err {
        Error::Format(f) => format!("{f:?}").split([' ', '(', '{']).next().unwrap().to_string(),
        other => format!("{other:?}"),
    })
}

/// Error kind expected when byte `offset` of the golden container is
/// inverted: fixed header, then the 4-byte payload length.
pub fn header_mutation_kind(offset: usize) -> &'static str {
    match offset {
        0..=3 => "BadMagic",
        4 => "BadVersion",
        5 => "BadCodec",
        6 => "BadQuality",
        7..=16 => "Inconsistent",
        17..=24 => "HashMismatch",
        25 => "BadFlags",
        _ => "LengthMismatch",
    }
}
