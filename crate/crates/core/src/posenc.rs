//! 3D multimodal rotary position embedding.
//!
//! Head channels are split into three contiguous segments, one per axis:
//! modality `m`, row `y` and column `x`. Within a segment, channel pair `k`
//! is rotated by `pos_axis * base^(-k / pairs_axis)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MODALITY_TEXT: i64 = 0;
pub const MODALITY_NOISE: i64 = 1;
pub const MODALITY_REFERENCE: i64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Position3 {
    pub m: i64,
    pub y: i64,
    pub x: i64,
}

impl Position3 {
    pub fn new(m: i64, y: i64, x: i64) -> Self {
        Position3 { m, y, x }
    }

    pub fn shifted(self, d: Position3) -> Self {
        Position3::new(self.m + d.m, self.y + d.y, self.x + d.x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RotaryConfig {
    pub head_dim: usize,
    /// Channel-pair counts for the `(m, y, x)` axes.
    pub split: (usize, usize, usize),
    pub base: f64,
}

impl RotaryConfig {
    /// Pairs divided roughly 1:1:2 between `m`, `y` and `x`.
    pub fn with_default_split(head_dim: usize, base: f64) -> Result<Self> {
        if !head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("head_dim {head_dim} must be even")));
        }
        let pairs = head_dim / 2;
        let dm = pairs / 4;
        let dy = pairs / 4;
        let cfg = RotaryConfig {
            head_dim,
            split: (dm, dy, pairs - dm - dy),
            base,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b, c) = self.split;
        if 2 * (a + b + c) != self.head_dim {
            return Err(Error::Config(format!(
                "split {:?} does not cover head_dim {}",
                self.split, self.head_dim
            )));
        }
        if !(self.base > 1.0) {
            return Err(Error::Config(format!("rotary base {} must exceed 1", self.base)));
        }
        Ok(())
    }
}

pub fn rotate(v: &[f64], pos: Position3, cfg: &RotaryConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if v.len() != cfg.head_dim {
        return Err(Error::Contract(format!(
            "vector has {} channels, head_dim is {}",
            v.len(),
            cfg.head_dim
        )));
    }
    let mut out = v.to_vec();
    let (dm, dy, dx) = cfg.split;
    let mut start = 0;
    for (pairs, coord) in [(dm, pos.m), (dy, pos.y), (dx, pos.x)] {
        for k in 0..pairs {
            let freq = cfg.base.powf(-(k as f64) / pairs as f64);
            let (s, c) = (coord as f64 * freq).sin_cos();
            let i = start + 2 * k;
            let (a, b) = (v[i], v[i + 1]);
            out[i] = a * c - b * s;
            out[i + 1] = a * s + b * c;
        }
        start += 2 * pairs;
    }
    Ok(out)
}

/// Positions for `[text tokens, noise-image tokens, reference-image tokens]`.
pub fn positions_for_sequence(
    text_len: usize,
    image_hw: (usize, usize),
    reference_hw: Option<(usize, usize)>,
) -> Vec<Position3> {
    let mut out: Vec<Position3> = (0..text_len as i64)
        .map(|i| Position3::new(MODALITY_TEXT, i, i))
        .collect();
    let grid = |m: i64, (h, w): (usize, usize)| {
        (0..h as i64).flat_map(move |r| (0..w as i64).map(move |c| Position3::new(m, r, c)))
    };
    out.extend(grid(MODALITY_NOISE, image_hw));
    if let Some(hw) = reference_hw {
        out.extend(grid(MODALITY_REFERENCE, hw));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn cfg() -> RotaryConfig {
        RotaryConfig::with_default_split(16, 10_000.0).unwrap()
    }

    #[test]
    fn default_split_is_x_heavy() {
        assert_eq!(cfg().split, (2, 2, 4));
        assert!(RotaryConfig::with_default_split(15, 10_000.0).is_err());
    }

    #[test]
    fn origin_is_identity() {
        let v: Vec<f64> = (0..16).map(|i| i as f64 * 0.3 - 2.0).collect();
        assert_eq!(rotate(&v, Position3::new(0, 0, 0), &cfg()).unwrap(), v);
    }

    #[test]
    fn wrong_dimension_is_rejected() {
        assert!(matches!(
            rotate(&[1.0; 8], Position3::new(0, 0, 0), &cfg()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn modality_changes_rotation() {
        let v = vec![1.0; 16];
        let a = rotate(&v, Position3::new(MODALITY_TEXT, 3, 3), &cfg()).unwrap();
        let b = rotate(&v, Position3::new(MODALITY_NOISE, 3, 3), &cfg()).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn text_positions_are_diagonal() {
        let pos = positions_for_sequence(3, (0, 0), None);
        assert_eq!(
            pos,
            vec![Position3::new(0, 0, 0), Position3::new(0, 1, 1), Position3::new(0, 2, 2)]
        );
    }

    #[test]
    fn image_grid_and_modalities() {
        let pos = positions_for_sequence(0, (2, 2), None);
        let cells: HashSet<(i64, i64)> = pos.iter().map(|p| (p.y, p.x)).collect();
        assert_eq!(pos.len(), 4);
        assert_eq!(cells, [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().collect());
        let mixed = positions_for_sequence(2, (2, 3), Some((1, 2)));
        assert_eq!(mixed.len(), 2 + 6 + 2);
        let ms: HashSet<i64> = mixed.iter().map(|p| p.m).collect();
        assert_eq!(ms.len(), 3);
    }
}
