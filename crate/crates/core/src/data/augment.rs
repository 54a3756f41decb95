//! Geometric and photometric augmentation applied jointly to rgb, depth and mask.

use rand::Rng;

use super::SceneSample;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentToggles {
    pub flip: bool,
    pub rotate: bool,
    pub brightness: bool,
}

impl AugmentToggles {
    pub const NONE: AugmentToggles = AugmentToggles {
        flip: false,
        rotate: false,
        brightness: false,
    };

    pub const ALL: AugmentToggles = AugmentToggles {
        flip: true,
        rotate: true,
        brightness: true,
    };
}

fn remap(t: &Tensor<f32>, out_h: usize, out_w: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Tensor<f32> {
    let s = t.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, out_h, out_w), |n, c, y, x| {
        let (sy, sx) = src(y, x);
        t.get(n, c, sy, sx)
    })
}

fn map_all(s: &SceneSample, f: impl Fn(&Tensor<f32>) -> Tensor<f32>) -> SceneSample {
    SceneSample {
        id: s.id.clone(),
        rgb: f(&s.rgb),
        depth: f(&s.depth),
        mask: f(&s.mask),
    }
}

pub fn flip_horizontal(s: &SceneSample) -> SceneSample {
    let (h, w) = s.size();
    map_all(s, |t| remap(t, h, w, |y, x| (y, w - 1 - x)))
}

/// Rotates clockwise by `times` quarter turns.
pub fn rotate90(s: &SceneSample, times: usize) -> SceneSample {
    let mut out = s.clone();
    for _ in 0..times % 4 {
        let (h, _) = out.size();
        out = map_all(&out, |t| {
            let sh = t.shape();
            remap(t, sh.w, sh.h, |y, x| (h - 1 - x, y))
        });
    }
    out
}

/// Scales rgb by `factor` and clamps to `[0, 1]`; depth and mask are untouched.
pub fn scale_brightness(s: &SceneSample, factor: f32) -> SceneSample {
    let mut out = s.clone();
    if factor != 1.0 {
        let shape = s.rgb.shape();
        let data = s.rgb.data().iter().map(|&v| (v * factor).clamp(0.0, 1.0)).collect();
        out.rgb = Tensor::from_vec(shape, data).expect("finite");
    }
    out
}

/// Random flip, quarter-turn rotation and brightness in `[0.7, 1.3]`.
/// Non-square samples are only rotated by half turns so their size is kept.
pub fn augment(s: &SceneSample, rng: &mut impl Rng, toggles: AugmentToggles) -> SceneSample {
    let mut out = s.clone();
    if toggles.flip && rng.gen_bool(0.5) {
        out = flip_horizontal(&out);
    }
    if toggles.rotate {
        let (h, w) = out.size();
        let turns = if h == w {
            rng.gen_range(0..4)
        } else {
            2 * rng.gen_range(0..2)
        };
        out = rotate90(&out, turns);
    }
    if toggles.brightness {
        out = scale_brightness(&out, rng.gen_range(0.7..=1.3));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_sample, GenConfig};
    use rand::SeedableRng;

    fn sample() -> SceneSample {
        generate_sample(5, &GenConfig::default()).unwrap()
    }

    #[test]
    fn flip_is_an_involution() {
        let s = sample();
        assert_eq!(flip_horizontal(&flip_horizontal(&s)), s);
        assert_ne!(flip_horizontal(&s), s);
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let s = sample();
        let mut r = s.clone();
        for _ in 0..4 {
            r = rotate90(&r, 1);
        }
        assert_eq!(r, s);
        assert_eq!(rotate90(&s, 4), s);
    }

    #[test]
    fn quarter_turn_moves_top_left_to_top_right() {
        let mut s = sample();
        s.mask = Tensor::from_fn(Shape::new(1, 1, 3, 4), |_, _, y, x| (y * 4 + x) as f32);
        s.rgb = Tensor::zeros(Shape::new(1, 3, 3, 4));
        s.depth = Tensor::zeros(Shape::new(1, 1, 3, 4));
        let r = rotate90(&s, 1);
        assert_eq!(r.mask.shape(), Shape::new(1, 1, 4, 3));
        assert_eq!(r.mask.get(0, 0, 0, 2), 0.0);
        assert_eq!(r.mask.get(0, 0, 3, 2), 3.0);
        assert_eq!(r.mask.get(0, 0, 0, 0), 8.0);
    }

    #[test]
    fn unit_brightness_is_identity() {
        let s = sample();
        assert_eq!(scale_brightness(&s, 1.0), s);
        let b = scale_brightness(&s, 1.3);
        assert_eq!(b.depth, s.depth);
        assert_eq!(b.mask, s.mask);
        assert!(b.rgb.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn augmentation_keeps_alignment_and_binarity() {
        let s = sample();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let a = augment(&s, &mut rng, AugmentToggles::ALL);
            a.validate().unwrap();
            // depth under the mask is the salient object's depth plane
            let inside: Vec<f32> = a
                .mask
                .data()
                .iter()
                .zip(a.depth.data())
                .filter(|(m, _)| **m == 1.0)
                .map(|(_, d)| *d)
                .collect();
            let orig: f32 = s
                .mask
                .data()
                .iter()
                .zip(s.depth.data())
                .filter(|(m, _)| **m == 1.0)
                .map(|(_, d)| *d)
                .sum();
            assert!((inside.iter().sum::<f32>() - orig).abs() < 1e-3);
        }
    }
}
