//! Synthetic arrangement task.
//!
//! Each image holds a red, a green and a blue rectangle at random,
//! non-overlapping positions, plus an optional gray distractor. The class is
//! three bits of their global layout:
//!
//! ```text
//! bit 0: red is left of green      bit 1: green is left of blue
//! bit 2: red is above blue
//! ```
//!
//! Deciding any bit needs information from two distant image regions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::{Element, Tensor};
use crate::{Error, Result};

pub const NUM_CLASSES: usize = 8;

/// Minimum separation (pixels) between the compared centre coordinates.
const MARGIN: f64 = 2.0;
const MAX_TRIES: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub image_size: usize,
    pub num_classes: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub seed: u64,
    /// Probability of drawing the gray distractor.
    pub distractor_prob: f64,
    pub noise_std: f64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            image_size: 32,
            num_classes: NUM_CLASSES,
            train_samples: 2048,
            val_samples: 512,
            seed: 0,
            distractor_prob: 0.5,
            noise_std: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Rect {
    x: usize,
    y: usize,
    w: usize,
    h: usize,
}

impl Rect {
    fn cx(&self) -> f64 {
        self.x as f64 + self.w as f64 / 2.0
    }

    fn cy(&self) -> f64 {
        self.y as f64 + self.h as f64 / 2.0
    }

    /// True when the rectangles overlap or touch.
    fn near(&self, o: &Rect) -> bool {
        self.x <= o.x + o.w && o.x <= self.x + self.w && self.y <= o.y + o.h && o.y <= self.y + self.h
    }
}

const COLORS: [[f64; 3]; 4] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.5, 0.5, 0.5]];

/// Label bits of a red/green/blue placement.
fn label_of(r: &Rect, g: &Rect, b: &Rect) -> Option<usize> {
    let order = |a: f64, c: f64| -> Option<bool> {
        if (a - c).abs() < MARGIN {
            None
        } else {
            Some(a < c)
        }
    };
    let b0 = order(r.cx(), g.cx())?;
    let b1 = order(g.cx(), b.cx())?;
    let b2 = order(r.cy(), b.cy())?;
    Some(b0 as usize | (b1 as usize) << 1 | (b2 as usize) << 2)
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes != NUM_CLASSES {
            return Err(Error::Config(format!(
                "the arrangement task has exactly {NUM_CLASSES} classes, got {}",
                self.num_classes
            )));
        }
        if self.image_size < 16 {
            return Err(Error::Config(format!("image_size {} < 16", self.image_size)));
        }
        if self.train_samples == 0 || self.val_samples == 0 {
            return Err(Error::Config("splits must be non-empty".into()));
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) || self.noise_std < 0.0 {
            return Err(Error::Config(
                "distractor_prob must be in [0,1] and noise_std >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_samples,
            Split::Val => self.val_samples,
        }
    }

    /// Global index of the `i`-th sample of a split; validation indices follow
    /// the training range so the splits never share a sample.
    pub fn global_index(&self, split: Split, i: usize) -> usize {
        match split {
            Split::Train => i,
            Split::Val => self.train_samples + i,
        }
    }

    /// Label of global sample `index`: classes cycle, so every split of a
    /// multiple of `K` samples is exactly balanced.
    pub fn label(&self, index: usize) -> usize {
        index % self.num_classes
    }

    fn rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }

    fn rect(&self, rng: &mut ChaCha8Rng) -> Rect {
        let s = self.image_size;
        let (lo, hi) = (s / 8, s / 4);
        let w = rng.gen_range(lo..=hi);
        let h = rng.gen_range(lo..=hi);
        Rect {
            x: rng.gen_range(0..=s - w),
            y: rng.gen_range(0..=s - h),
            w,
            h,
        }
    }

    /// Image `[S, S, 3]` (row-major, channels last) and label of sample `index`.
    pub fn sample(&self, index: usize) -> (Vec<f64>, usize) {
        let label = self.label(index);
        let mut rng = self.rng(index);
        let rects = (0..MAX_TRIES)
            .find_map(|_| {
                let [r, g, b] = [self.rect(&mut rng), self.rect(&mut rng), self.rect(&mut rng)];
                let disjoint = !r.near(&g) && !g.near(&b) && !r.near(&b);
                (disjoint && label_of(&r, &g, &b) == Some(label)).then_some([r, g, b])
            })
            .expect("placement found within the retry budget");
        let mut placed = rects.to_vec();
        if rng.gen::<f64>() < self.distractor_prob {
            if let Some(d) = (0..MAX_TRIES)
                .map(|_| self.rect(&mut rng))
                .find(|d| placed.iter().all(|p| !p.near(d)))
            {
                placed.push(d);
            }
        }
        let s = self.image_size;
        let noise = Normal::new(0.0, self.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
        let mut img: Vec<f64> = (0..s * s * 3)
            .map(|_| {
                if self.noise_std > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                }
            })
            .collect();
        for (rect, color) in placed.iter().zip(COLORS) {
            for y in rect.y..rect.y + rect.h {
                for x in rect.x..rect.x + rect.w {
                    let p = (y * s + x) * 3;
                    for (c, &v) in color.iter().enumerate() {
                        img[p + c] += v;
                    }
                }
            }
        }
        (img, label)
    }

    /// All samples of a split, in index order.
    pub fn materialize(&self, split: Split) -> Vec<(Vec<f64>, usize)> {
        (0..self.len(split))
            .map(|i| self.sample(self.global_index(split, i)))
            .collect()
    }
}

/// Horizontal mirror of a `[S, S, 3]` image. Mirroring swaps left and right,
/// so the two horizontal label bits flip.
pub fn hflip(img: &[f64], size: usize, label: usize) -> (Vec<f64>, usize) {
    let mut out = vec![0.0; img.len()];
    for y in 0..size {
        for x in 0..size {
            let (src, dst) = ((y * size + x) * 3, (y * size + size - 1 - x) * 3);
            out[dst..dst + 3].copy_from_slice(&img[src..src + 3]);
        }
    }
    (out, label ^ 0b011)
}

/// Stacks images into `[B, S, S, 3]`.
pub fn batch_tensor<T: Element>(images: &[&[f64]], size: usize) -> Result<Tensor<T>> {
    let data: Vec<T> = images.iter().flat_map(|im| im.iter().map(|&v| T::of(v))).collect();
    Tensor::new([images.len(), size, size, 3], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let t = SyntheticTask::default();
        assert_eq!(t.sample(17), t.sample(17));
        assert_ne!(t.sample(17).0, t.sample(18).0);
        let mut counts = [0; NUM_CLASSES];
        for i in 0..64 {
            counts[t.sample(t.global_index(Split::Val, i)).1] += 1;
        }
        assert!(counts.iter().all(|&c| c == 8));
    }

    #[test]
    fn flip_relabels_horizontal_bits() {
        let t = SyntheticTask {
            noise_std: 0.0,
            distractor_prob: 0.0,
            ..Default::default()
        };
        let (img, label) = t.sample(5);
        let (f, fl) = hflip(&img, 32, label);
        assert_eq!(fl, 5 ^ 3);
        assert_eq!(hflip(&f, 32, fl), (img, label));
    }
}
