//! Metric oracles written directly from the definitions, over 2-D grids.

use rand::Rng;

pub type Grid = Vec<Vec<f64>>;

pub fn grid(v: &[f64], h: usize, w: usize) -> Grid {
    (0..h).map(|r| v[r * w..(r + 1) * w].to_vec()).collect()
}

pub fn avg(g: &Grid) -> f64 {
    let n: usize = g.iter().map(Vec::len).sum();
    g.iter().flatten().sum::<f64>() / n as f64
}

pub fn random_mask(h: usize, w: usize, p: f64, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let m: Vec<f64> = (0..h * w).map(|_| if rng.gen_bool(p) { 1.0 } else { 0.0 }).collect();
        if m.contains(&1.0) && m.contains(&0.0) {
            return m;
        }
    }
}

pub fn random_map(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen::<f64>()).collect()
}

/// F-measure by enumerating every pixel into a confusion table.
pub fn f_oracle(s: &[f64], g: &[f64]) -> f64 {
    let tau = (2.0 * s.iter().sum::<f64>() / s.len() as f64).min(1.0);
    let mut table = [[0usize; 2]; 2];
    for i in 0..s.len() {
        table[(s[i] >= tau) as usize][g[i] as usize] += 1;
    }
    let (tp, fp, fn_) = (table[1][1] as f64, table[1][0] as f64, table[0][1] as f64);
    let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 1.0 };
    let r = tp / (tp + fn_);
    if p + r == 0.0 {
        0.0
    } else {
        1.3 * p * r / (0.3 * p + r)
    }
}

pub fn e_oracle(s: &[f64], g: &[f64], h: usize, w: usize) -> f64 {
    let tau = (2.0 * s.iter().sum::<f64>() / s.len() as f64).min(1.0);
    let b = grid(&s.iter().map(|&v| (v >= tau) as u8 as f64).collect::<Vec<_>>(), h, w);
    let gt = grid(g, h, w);
    let (mb, mg) = (avg(&b), avg(&gt));
    let mut total = 0.0;
    for r in 0..h {
        for c in 0..w {
            let (x, y) = (gt[r][c] - mg, b[r][c] - mb);
            let xi = 2.0 * x * y / (x * x + y * y + f64::EPSILON);
            total += (1.0 + xi) * (1.0 + xi) / 4.0;
        }
    }
    total / (h * w) as f64
}

/// Structure measure written out over 2-D grids.
pub fn s_oracle(s: &[f64], g: &[f64], h: usize, w: usize) -> f64 {
    let (sm, gm) = (grid(s, h, w), grid(g, h, w));
    let fg_frac = avg(&gm);

    let object = |vals: Vec<f64>| {
        let n = vals.len() as f64;
        let mu = vals.iter().sum::<f64>() / n;
        let sigma = if vals.len() < 2 {
            0.0
        } else {
            (vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        2.0 * mu / (mu * mu + 1.0 + sigma + f64::EPSILON)
    };
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if gm[r][c] == 1.0 {
                fg.push(sm[r][c]);
            } else {
                bg.push(1.0 - sm[r][c]);
            }
        }
    }
    let s_obj = fg_frac * object(fg) + (1.0 - fg_frac) * object(bg);

    let total: f64 = g.iter().sum();
    let mut cx = 0.0;
    let mut cy = 0.0;
    for r in 0..h {
        for c in 0..w {
            cx += gm[r][c] * (c as f64 + 1.0);
            cy += gm[r][c] * (r as f64 + 1.0);
        }
    }
    let (x, y) = ((cx / total).round() as usize, (cy / total).round() as usize);
    let quadrant = |m: &Grid, r0: usize, r1: usize, c0: usize, c1: usize| -> Vec<f64> {
        m[r0..r1].iter().flat_map(|row| row[c0..c1].to_vec()).collect()
    };
    let ssim = |a: Vec<f64>, b: Vec<f64>| {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let mut va = 0.0;
        let mut vb = 0.0;
        let mut cov = 0.0;
        for i in 0..a.len() {
            va += (a[i] - ma).powi(2);
            vb += (b[i] - mb).powi(2);
            cov += (a[i] - ma) * (b[i] - mb);
        }
        let d = n - 1.0 + f64::EPSILON;
        let (va, vb, cov) = (va / d, vb / d, cov / d);
        let num = 4.0 * ma * mb * cov;
        let den = (ma * ma + mb * mb) * (va + vb);
        if num != 0.0 {
            num / (den + f64::EPSILON)
        } else if den == 0.0 {
            1.0
        } else {
            0.0
        }
    };
    let mut s_reg = 0.0;
    for (r0, r1, c0, c1) in [(0, y, 0, x), (0, y, x, w), (y, h, 0, x), (y, h, x, w)] {
        let cells = (r1 - r0) * (c1 - c0);
        if cells > 0 {
            let weight = cells as f64 / (h * w) as f64;
            s_reg += weight * ssim(quadrant(&sm, r0, r1, c0, c1), quadrant(&gm, r0, r1, c0, c1));
        }
    }
    (0.5 * s_obj + 0.5 * s_reg).max(0.0)
}
