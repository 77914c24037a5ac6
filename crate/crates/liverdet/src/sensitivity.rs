//! Lesion-sensitivity scaling and mask generation.
//!
//! A segmentation mask is the per-voxel argmax over the 14 confidence
//! channels. Multiplying only the lesion channels (1-6) by a factor f > 1
//! before the argmax makes weak lesion evidence win more often; f = 1 is the
//! default model behaviour. No renormalization happens after scaling - the
//! argmax compares raw magnitudes.

use crate::error::{Error, Result};
use crate::grid::LabelGrid;
use crate::prob::ProbMaps;

/// Multiplier applied to the six lesion channels before the argmax.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensitivityFactor(f64);

impl SensitivityFactor {
    pub fn new(f: f64) -> Result<Self> {
        if !(f.is_finite() && f > 0.0) {
            return Err(Error::InvalidFactor(f));
        }
        Ok(SensitivityFactor(f))
    }

    pub fn get(self) -> f64 {
        self.0
    }

    /// The baseline factor: leaves the maps untouched.
    pub fn base() -> Self {
        SensitivityFactor(1.0)
    }
}

impl std::fmt::Display for SensitivityFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl TryFrom<f64> for SensitivityFactor {
    type Error = Error;

    fn try_from(f: f64) -> Result<Self> {
        SensitivityFactor::new(f)
    }
}

/// Multiplies the lesion channels (1-6) by `factor`, leaving background and
/// organ channels untouched. Values may exceed 1 afterwards.
pub fn scale_lesion_channels(prob: &ProbMaps, factor: SensitivityFactor) -> ProbMaps {
    let f = factor.get() as f32;
    let mut scaled = prob.clone();
    for ch in &mut scaled.channels_mut()[1..=6] {
        for v in ch.data_mut() {
            *v *= f;
        }
    }
    scaled
}

/// Per-voxel argmax over all 14 channels; exact ties go to the lowest
/// channel index, so background wins a dead heat against any lesion.
pub fn argmax_mask(prob: &ProbMaps) -> LabelGrid {
    argmax_mask_scaled(prob, SensitivityFactor::base())
}

/// Fused scale-then-argmax. Multiplying by 1.0 reproduces `argmax_mask`
/// bit for bit, and for any factor this equals composing
/// [`scale_lesion_channels`] with [`argmax_mask`] because both paths perform
/// the identical f32 multiplication before comparing.
pub fn argmax_mask_scaled(prob: &ProbMaps, factor: SensitivityFactor) -> LabelGrid {
    let f = factor.get() as f32;
    let channels = prob.channels();
    let n = prob.dims().len();
    let mut out = vec![0u8; n];
    for (i, slot) in out.iter_mut().enumerate() {
        let mut best = channels[0].data()[i];
        let mut best_c = 0u8;
        for (c, ch) in channels.iter().enumerate().skip(1) {
            let mut v = ch.data()[i];
            if (1..=6).contains(&c) {
                v *= f;
            }
            if v > best {
                best = v;
                best_c = c as u8;
            }
        }
        *slot = best_c;
    }
    LabelGrid::new(prob.dims(), prob.spacing(), out).expect("geometry comes from prob")
}

/// One label mask per factor, in the given order.
pub fn masks_at_sensitivities(
    prob: &ProbMaps,
    factors: &[SensitivityFactor],
) -> Result<Vec<(SensitivityFactor, LabelGrid)>> {
    if factors.is_empty() {
        return Err(Error::EmptyInput("masks_at_sensitivities needs at least one factor"));
    }
    Ok(factors.iter().map(|&f| (f, argmax_mask_scaled(prob, f))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Dims, ScalarGrid, Spacing};
    use crate::labels::ClassLabel;

    /// One-voxel maps from explicit channel values.
    fn voxel_maps(values: [f32; 14]) -> ProbMaps {
        let dims = Dims::new(1, 1, 1);
        let s = Spacing::isotropic(1.0).unwrap();
        ProbMaps::new(
            values.iter().map(|&v| ScalarGrid::filled(dims, s, v).unwrap()).collect(),
        )
        .unwrap()
    }

    fn probe(bg: f32, hcc: f32, liver: f32) -> ProbMaps {
        let mut vals = [0.0f32; 14];
        vals[0] = bg;
        vals[1] = hcc;
        vals[7] = liver;
        voxel_maps(vals)
    }

    #[test]
    fn factor_one_is_identity() {
        let maps = probe(0.55, 0.25, 0.20);
        let scaled = scale_lesion_channels(&maps, SensitivityFactor::base());
        assert_eq!(scaled, maps);
    }

    #[test]
    fn scale_touches_only_lesion_channels() {
        let maps = probe(0.55, 0.25, 0.20);
        let f4 = SensitivityFactor::new(4.0).unwrap();
        let scaled = scale_lesion_channels(&maps, f4);
        assert_eq!(scaled.channel(ClassLabel::BACKGROUND).data()[0], 0.55);
        assert_eq!(scaled.channel(ClassLabel::HCC).data()[0], 1.0);
        assert_eq!(scaled.channel(ClassLabel::LIVER).data()[0], 0.20);

        // A pure-organ voxel is untouched.
        let organ = probe(0.1, 0.0, 0.9);
        assert_eq!(scale_lesion_channels(&organ, f4), organ);
    }

    #[test]
    fn argmax_picks_strongest_channel() {
        let mut vals = [0.0f32; 14];
        vals[1] = 1.0;
        assert_eq!(argmax_mask(&voxel_maps(vals)).data()[0], 1);
    }

    #[test]
    fn scaling_flips_weak_lesion_to_detected() {
        // (bg 0.55, HCC 0.25, liver 0.20): background at f=1, HCC at f=4.
        let maps = probe(0.55, 0.25, 0.20);
        assert_eq!(argmax_mask(&maps).data()[0], 0);
        let f4 = SensitivityFactor::new(4.0).unwrap();
        assert_eq!(argmax_mask_scaled(&maps, f4).data()[0], 1);
    }

    #[test]
    fn exact_tie_goes_to_lowest_index() {
        let maps = probe(0.5, 0.5, 0.0);
        assert_eq!(argmax_mask(&maps).data()[0], 0);
    }

    #[test]
    fn invalid_factors_rejected() {
        assert!(SensitivityFactor::new(0.0).is_err());
        assert!(SensitivityFactor::new(-1.0).is_err());
        assert!(SensitivityFactor::new(f64::NAN).is_err());
        assert!(SensitivityFactor::new(f64::INFINITY).is_err());
    }

    #[test]
    fn fused_path_equals_composed_path() {
        use rand::{Rng, SeedableRng};
        let dims = Dims::new(2, 3, 3);
        let s = Spacing::isotropic(1.0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let channels: Vec<ScalarGrid> = (0..14)
            .map(|_| {
                let data: Vec<f32> = (0..dims.len()).map(|_| rng.random::<f32>()).collect();
                ScalarGrid::new(dims, s, data).unwrap()
            })
            .collect();
        let maps = ProbMaps::new(channels).unwrap();
        for f in [1.0, 2.0, 4.0, 7.5] {
            let factor = SensitivityFactor::new(f).unwrap();
            let fused = argmax_mask_scaled(&maps, factor);
            let composed = argmax_mask(&scale_lesion_channels(&maps, factor));
            assert_eq!(fused, composed, "f={f}");
        }
    }

    #[test]
    fn masks_at_sensitivities_matches_composition_and_monotonicity() {
        use rand::{Rng, SeedableRng};
        let dims = Dims::new(2, 4, 4);
        let s = Spacing::isotropic(1.0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let channels: Vec<ScalarGrid> = (0..14)
            .map(|_| {
                let data: Vec<f32> = (0..dims.len()).map(|_| rng.random::<f32>()).collect();
                ScalarGrid::new(dims, s, data).unwrap()
            })
            .collect();
        let maps = ProbMaps::new(channels).unwrap();
        let factors: Vec<SensitivityFactor> = [1.0, 2.0, 4.0, 8.0]
            .iter()
            .map(|&f| SensitivityFactor::new(f).unwrap())
            .collect();
        let masks = masks_at_sensitivities(&maps, &factors).unwrap();
        assert_eq!(masks.len(), 4);
        for w in masks.windows(2) {
            let (lo, hi) = (&w[0].1, &w[1].1);
            for i in 0..dims.len() {
                let (a, b) = (lo.data()[i], hi.data()[i]);
                if (1..=6).contains(&a) {
                    // Once a lesion, always a lesion at higher f, same class.
                    assert_eq!(b, a);
                }
            }
        }
    }

    #[test]
    fn empty_factor_list_rejected() {
        let maps = probe(1.0, 0.0, 0.0);
        assert!(masks_at_sensitivities(&maps, &[]).is_err());
    }
}
