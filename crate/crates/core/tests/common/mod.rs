//! Brute-force reference implementations written as explicit loops over
//! nested vectors. They read weights from the library's parameter structs
//! and nothing else.

#![allow(dead_code)]

pub mod properties;

use memtrack::attention::{AttnParams, MlpParams, Norm};
use memtrack::fusion::FusionParams;
use memtrack::memory::{MemoryBank, MemoryKind};
use memtrack::perceiver::{OutputPosition, PerceiverParams};
use memtrack::{FeatureMap, Matrix, Rng, TokenSet};

pub type Mat = Vec<Vec<f64>>;

pub fn rows(m: &Matrix) -> Mat {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

pub fn max_diff(a: &Mat, b: &Matrix) -> f64 {
    assert_eq!((a.len(), a.first().map_or(b.cols(), Vec::len)), b.shape());
    let mut worst = 0.0f64;
    for (i, row) in a.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            worst = worst.max((v - b.get(i, j)).abs());
        }
    }
    worst
}

pub fn matmul(a: &Mat, b: &Matrix) -> Mat {
    let (k, n) = b.shape();
    a.iter()
        .map(|row| {
            assert_eq!(row.len(), k);
            (0..n)
                .map(|j| {
                    let mut s = 0.0;
                    for (t, &x) in row.iter().enumerate() {
                        s += x * b.get(t, j);
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn layer_norm(x: &Mat, n: &Norm, eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let c = row.len() as f64;
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * n.gain[j] + n.bias[j])
                .collect()
        })
        .collect()
}

const EPS: f64 = 1e-6;

/// Pre-norm residual single-head attention; `allowed(i, j)` masks keys.
pub fn masked_attention(
    q: &Mat,
    kv: &Mat,
    p: &AttnParams,
    allowed: impl Fn(usize, usize) -> bool,
) -> Mat {
    let c = p.wq.rows() as f64;
    let qp = matmul(&layer_norm(q, &p.norm_q, EPS), &p.wq);
    let kvn = layer_norm(kv, &p.norm_kv, EPS);
    let kp = matmul(&kvn, &p.wk);
    let vp = matmul(&kvn, &p.wv);
    let mut out = Vec::with_capacity(q.len());
    for (i, qi) in qp.iter().enumerate() {
        let scores: Vec<f64> = kp
            .iter()
            .enumerate()
            .map(|(j, kj)| {
                if allowed(i, j) {
                    qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / c.sqrt()
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut ctx = vec![0.0; vp[0].len()];
        for (j, vj) in vp.iter().enumerate() {
            for (acc, v) in ctx.iter_mut().zip(vj) {
                *acc += e[j] / z * v;
            }
        }
        let o = matmul(&vec![ctx], &p.wo).remove(0);
        out.push(q[i].iter().zip(&o).map(|(a, b)| a + b).collect());
    }
    out
}

pub fn attention(q: &Mat, kv: &Mat, p: &AttnParams) -> Mat {
    masked_attention(q, kv, p, |_, _| true)
}

pub fn gelu(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + 0.044715 * x * x * x)).tanh())
}

pub fn mlp(x: &Mat, p: &MlpParams) -> Mat {
    let xn = layer_norm(x, &p.norm, EPS);
    let h: Mat = matmul(&xn, &p.w1)
        .into_iter()
        .map(|r| r.iter().zip(&p.b1).map(|(a, b)| gelu(a + b)).collect())
        .collect();
    matmul(&h, &p.w2)
        .into_iter()
        .zip(x)
        .map(|(r, xi)| {
            r.iter()
                .zip(&p.b2)
                .zip(xi)
                .map(|((a, b), x0)| x0 + a + b)
                .collect()
        })
        .collect()
}

pub fn pe(h: usize, w: usize, c: usize) -> Mat {
    let q = c / 4;
    let mut out = vec![vec![0.0; c]; h * w];
    for y in 0..h {
        for x in 0..w {
            for k in 0..q {
                let f = 1.0 / 10_000f64.powf(k as f64 / q as f64);
                let row = &mut out[y * w + x];
                row[k] = (y as f64 * f).sin();
                row[q + k] = (y as f64 * f).cos();
                row[2 * q + k] = (x as f64 * f).sin();
                row[3 * q + k] = (x as f64 * f).cos();
            }
        }
    }
    out
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

/// Scalar-trig 2D rotary encoding on a `gh×gw` grid.
pub fn rope(tokens: &Mat, gw: usize) -> Mat {
    tokens
        .iter()
        .enumerate()
        .map(|(p, row)| {
            let c = row.len();
            let (y, x) = ((p / gw) as f64, (p % gw) as f64);
            let mut out = row.clone();
            for k in 0..c / 4 {
                let theta = 10_000f64.powf(-(k as f64) / (c / 4) as f64);
                for (base, pos) in [(2 * k, y), (c / 2 + 2 * k, x)] {
                    let (a, b) = (row[base], row[base + 1]);
                    let ang = pos * theta;
                    out[base] = a * ang.cos() - b * ang.sin();
                    out[base + 1] = a * ang.sin() + b * ang.cos();
                }
            }
            out
        })
        .collect()
}

pub fn global_perceive(m: &FeatureMap, p: &PerceiverParams) -> Mat {
    let (c, h, w) = m.dims();
    let mut kv = rows(m.tokens());
    if p.config.global_positional {
        kv = add(&kv, &pe(h, w, c));
    }
    let mut lat = rows(p.global_latents.matrix());
    for layer in &p.layers {
        lat = mlp(&attention(&lat, &kv, &layer.cross.attn), &layer.cross.mlp);
        if p.config.self_attention {
            lat = mlp(
                &attention(&lat, &lat, &layer.latent_self.attn),
                &layer.latent_self.mlp,
            );
        }
    }
    lat
}

/// Every spatial latent attends to the whole map with keys outside its own
/// window masked out.
pub fn spatial_perceive(m: &FeatureMap, p: &PerceiverParams) -> Mat {
    let (_, h, w) = m.dims();
    let nl = p.spatial_latents.n();
    let side = (nl as f64).sqrt().round() as usize;
    let (wh, ww) = (h / side, w / side);
    let window_of = |pos: usize| (pos / w / wh) * side + (pos % w) / ww;
    let kv = rows(m.tokens());
    let stack = p.spatial_layers.as_ref().unwrap_or(&p.layers);
    let mut lat = rows(p.spatial_latents.matrix());
    for layer in stack {
        lat = masked_attention(&lat, &kv, &layer.cross.attn, |i, j| window_of(j) == i);
        lat = mlp(&lat, &layer.cross.mlp);
        if p.config.self_attention {
            lat = mlp(
                &attention(&lat, &lat, &layer.latent_self.attn),
                &layer.latent_self.mlp,
            );
        }
    }
    match p.config.spatial_position {
        OutputPosition::Rope => rope(&lat, side),
        OutputPosition::Additive => add(&lat, &pe(side, side, lat[0].len())),
        OutputPosition::None => lat,
    }
}

pub fn bank_tokens(bank: &MemoryBank) -> Mat {
    let mut kv = Vec::new();
    for f in bank.frames() {
        match &f.kind {
            MemoryKind::Dense(m) => kv.extend(rows(m.tokens())),
            MemoryKind::Compressed(cm) => {
                kv.extend(rows(cm.global().matrix()));
                kv.extend(rows(cm.spatial().matrix()));
            }
        }
    }
    if bank.pointers_in_attention() {
        kv.extend(bank.pointers().map(|p| p.vector.clone()));
    }
    kv
}

pub fn fuse(f16: &FeatureMap, bank: &MemoryBank, p: &FusionParams) -> Mat {
    let (c, h, w) = f16.dims();
    let mut x = rows(f16.tokens());
    if bank.is_empty() {
        return x;
    }
    if p.query_positional {
        x = add(&x, &pe(h, w, c));
    }
    let kv = bank_tokens(bank);
    for b in &p.blocks {
        if p.layout.self_attention {
            x = attention(&x, &x, &b.self_attn);
        }
        if p.layout.cross_attention {
            x = attention(&x, &kv, &b.cross_attn);
        }
        x = mlp(&x, &b.mlp);
    }
    x
}

/// Random `h×w×c` map.
pub fn random_map(c: usize, h: usize, w: usize, rng: &mut Rng) -> FeatureMap {
    FeatureMap::from_tokens(h, w, Matrix::random(h * w, c, 1.0, rng)).unwrap()
}

pub fn random_tokens(n: usize, c: usize, rng: &mut Rng) -> TokenSet {
    TokenSet::new(Matrix::random(n, c, 1.0, rng))
}

fn random_norm(c: usize, rng: &mut Rng) -> Norm {
    Norm {
        gain: (0..c).map(|_| 1.0 + rng.uniform(0.5)).collect(),
        bias: (0..c).map(|_| rng.uniform(0.5)).collect(),
    }
}

/// Attention weights with non-trivial norm parameters.
pub fn random_attn(c: usize, rng: &mut Rng) -> AttnParams {
    let mut p = AttnParams::init(c, rng);
    p.norm_q = random_norm(c, rng);
    p.norm_kv = random_norm(c, rng);
    p
}

pub fn random_mlp(c: usize, rng: &mut Rng) -> MlpParams {
    let mut p = MlpParams::init(c, rng);
    p.norm = random_norm(c, rng);
    p
}

fn randomize_block(b: &mut memtrack::attention::BlockParams, rng: &mut Rng) {
    let c = b.attn.wq.rows();
    b.attn = random_attn(c, rng);
    b.mlp = random_mlp(c, rng);
}

pub fn check_cross(rng: &mut Rng) -> f64 {
    let c = 1 + rng.index(12);
    let (nq, nk) = (1 + rng.index(10), 1 + rng.index(20));
    let p = random_attn(c, rng);
    let q = random_tokens(nq, c, rng);
    let kv = random_tokens(nk, c, rng);
    let got = memtrack::attention::cross_attention(&q, &kv, &p).unwrap();
    max_diff(
        &attention(&rows(q.matrix()), &rows(kv.matrix()), &p),
        got.matrix(),
    )
}

pub fn check_self(rng: &mut Rng) -> f64 {
    let c = 1 + rng.index(12);
    let n = 1 + rng.index(16);
    let p = random_attn(c, rng);
    let x = random_tokens(n, c, rng);
    let got = memtrack::attention::self_attention(&x, &p).unwrap();
    let xr = rows(x.matrix());
    max_diff(&attention(&xr, &xr, &p), got.matrix())
}

fn random_perceiver(c: usize, ng: usize, nl: usize, rng: &mut Rng) -> PerceiverParams {
    use memtrack::perceiver::PerceiverConfig;
    let config = PerceiverConfig {
        depth: 1 + rng.index(2),
        self_attention: rng.index(4) > 0,
        share_params: rng.index(2) == 0,
        global_positional: rng.index(2) == 0,
        spatial_position: [
            OutputPosition::Rope,
            OutputPosition::Additive,
            OutputPosition::None,
        ][rng.index(3)],
    };
    let mut p = PerceiverParams::init(c, ng, nl, config, rng).unwrap();
    for l in p
        .layers
        .iter_mut()
        .chain(p.spatial_layers.iter_mut().flatten())
    {
        randomize_block(&mut l.cross, rng);
        randomize_block(&mut l.latent_self, rng);
    }
    p
}

pub fn check_global(rng: &mut Rng) -> f64 {
    let c = 4 * (1 + rng.index(3));
    let (h, w) = (1 + rng.index(6), 1 + rng.index(6));
    let p = random_perceiver(c, 1 + rng.index(6), 0, rng);
    let m = random_map(c, h, w, rng);
    let got = memtrack::perceiver::global_perceive(&m, &p).unwrap();
    max_diff(&global_perceive(&m, &p), got.matrix())
}

pub fn check_spatial(rng: &mut Rng) -> f64 {
    let c = 4 * (1 + rng.index(3));
    let side = 1 + rng.index(3);
    let (h, w) = (side * (1 + rng.index(3)), side * (1 + rng.index(3)));
    let p = random_perceiver(c, rng.index(3), side * side, rng);
    let m = random_map(c, h, w, rng);
    let got = memtrack::perceiver::spatial_perceive(&m, &p).unwrap();
    assert_eq!(got.grid(), Some((side, side)));
    max_diff(&spatial_perceive(&m, &p), got.matrix())
}

pub fn check_fuse(rng: &mut Rng) -> f64 {
    use memtrack::fusion::BlockLayout;
    use memtrack::memory::{FrameMemory, ObjectPointer};
    use memtrack::perceiver::{compress, PerceiverConfig};
    let c = 4 * (1 + rng.index(3));
    let (h, w) = (2 * (1 + rng.index(2)), 2 * (1 + rng.index(2)));
    let mut fp = FusionParams::init(c, 1 + rng.index(3), rng).unwrap();
    for b in fp.blocks.iter_mut() {
        b.self_attn = random_attn(c, rng);
        b.cross_attn = random_attn(c, rng);
        b.mlp = random_mlp(c, rng);
    }
    fp.layout = BlockLayout {
        self_attention: rng.index(4) > 0,
        cross_attention: rng.index(4) > 0,
    };
    fp.query_positional = rng.index(2) == 0;
    let compressed = rng.index(2) == 0;
    let perceiver =
        PerceiverParams::init(c, 1 + rng.index(3), 4, PerceiverConfig::default(), rng).unwrap();
    let mut bank = MemoryBank::new(1 + rng.index(4), rng.index(5))
        .unwrap()
        .with_pointers_in_attention(rng.index(2) == 0);
    for t in 0..rng.index(6) {
        let m = random_map(c, h, w, rng);
        let mem = if compressed {
            FrameMemory::compressed(t, compress(&m, &perceiver).unwrap())
        } else {
            FrameMemory::dense(t, m)
        };
        let ptr = ObjectPointer {
            frame_index: t,
            vector: random_tokens(1, c, rng).into_matrix().into_vec(),
        };
        bank.push(mem, Some(ptr)).unwrap();
    }
    let f16 = random_map(c, h, w, rng);
    let got = memtrack::fusion::fuse(&f16, &bank, &fp).unwrap();
    max_diff(&fuse(&f16, &bank, &fp), got.tokens())
}

/// Worst elementwise gap on one random fixture.
pub type OracleCheck = fn(&mut Rng) -> f64;

pub const ORACLE_CHECKS: [(&str, OracleCheck); 5] = [
    ("cross_attention", check_cross),
    ("self_attention", check_self),
    ("global_perceive", check_global),
    ("spatial_perceive", check_spatial),
    ("fuse", check_fuse),
];
