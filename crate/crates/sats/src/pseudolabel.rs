//! Pseudo-label generation rules and the batch confidence weight.
//!
//! Two labeling rules share the same (K+1)-channel teacher output: the
//! open-set rule takes the argmax over known channels only and falls back to
//! unknown below a confidence threshold, while the closed-set rule takes the
//! argmax over all channels including unknown. Argmax ties break to the
//! lowest class index.

use crate::datamodel::{ClassSpace, LabelMap, ProbMap};
use crate::{Error, Result};

/// Confidence thresholds for pseudo-label generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabelConfig {
    /// Minimum known-class probability required to keep a known label;
    /// pixels below it are labeled unknown.
    pub tau1: f64,
    /// Per-pixel probability a prediction must exceed (strictly) to count
    /// toward the confidence weight.
    pub tau2: f64,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        PseudoLabelConfig {
            tau1: 0.5,
            tau2: 0.968,
        }
    }
}

impl PseudoLabelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau1", self.tau1), ("tau2", self.tau2)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::validation(format!(
                    "{name} must be in (0,1), got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Argmax over channels `0..limit`, ties to the lowest index.
#[inline]
fn argmax_until(probs: &ProbMap, pixel: usize, limit: usize) -> (usize, f64) {
    let mut best_c = 0;
    let mut best_p = probs.at(0, pixel);
    for c in 1..limit {
        let p = probs.at(c, pixel);
        if p > best_p {
            best_p = p;
            best_c = c;
        }
    }
    (best_c, best_p)
}

fn expect_expanded(probs: &ProbMap, cs: &ClassSpace) -> Result<()> {
    if probs.channels != cs.num_channels_expanded() {
        return Err(Error::validation(format!(
            "expected {} channels (K+1), got {}",
            cs.num_channels_expanded(),
            probs.channels
        )));
    }
    Ok(())
}

/// Open-set rule: per pixel, the argmax over known channels when its
/// probability reaches `tau1`, otherwise the unknown class.
pub fn open_set_pseudo_label(
    teacher_probs: &ProbMap,
    cs: &ClassSpace,
    tau1: f64,
) -> Result<LabelMap> {
    expect_expanded(teacher_probs, cs)?;
    let unknown = cs.unknown_index();
    let mut values = Vec::with_capacity(teacher_probs.num_pixels());
    for p in 0..teacher_probs.num_pixels() {
        let (best_c, best_p) = argmax_until(teacher_probs, p, cs.num_known);
        values.push(if best_p >= tau1 { best_c as u8 } else { unknown });
    }
    LabelMap::from_values(values, teacher_probs.width, teacher_probs.height)
}

/// Closed-set rule: per pixel, the argmax over all K+1 channels.
pub fn closed_set_pseudo_label(teacher_probs: &ProbMap, cs: &ClassSpace) -> Result<LabelMap> {
    expect_expanded(teacher_probs, cs)?;
    let mut values = Vec::with_capacity(teacher_probs.num_pixels());
    for p in 0..teacher_probs.num_pixels() {
        let (best_c, _) = argmax_until(teacher_probs, p, teacher_probs.channels);
        values.push(best_c as u8);
    }
    LabelMap::from_values(values, teacher_probs.width, teacher_probs.height)
}

/// Fraction of pixels whose maximum probability over all channels strictly
/// exceeds `tau2`; the denominator is the full pixel count.
pub fn confidence_weight(teacher_probs: &ProbMap, tau2: f64) -> f64 {
    let n = teacher_probs.num_pixels();
    if n == 0 {
        return 0.0;
    }
    let mut confident = 0usize;
    for p in 0..n {
        let (_, best_p) = argmax_until(teacher_probs, p, teacher_probs.channels);
        if best_p > tau2 {
            confident += 1;
        }
    }
    confident as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cs(k: usize) -> ClassSpace {
        ClassSpace::new(k, 1).unwrap()
    }

    /// 1x1 ProbMap over the given per-channel probabilities.
    fn pixel_probs(probs: &[f64]) -> ProbMap {
        ProbMap {
            probs: probs.to_vec(),
            channels: probs.len(),
            width: 1,
            height: 1,
        }
    }

    #[test]
    fn open_set_keeps_confident_known() {
        let space = cs(2);
        let pm = pixel_probs(&[0.6, 0.3, 0.1]);
        let lbl = open_set_pseudo_label(&pm, &space, 0.5).unwrap();
        assert_eq!(lbl.values, vec![0]);
    }

    #[test]
    fn open_set_falls_back_to_unknown() {
        let space = cs(2);
        let pm = pixel_probs(&[0.4, 0.35, 0.25]);
        let lbl = open_set_pseudo_label(&pm, &space, 0.5).unwrap();
        assert_eq!(lbl.values, vec![space.unknown_index()]);
    }

    #[test]
    fn open_set_ignores_unknown_channel_confidence() {
        // The unknown channel dominating must not make the pixel known.
        let space = cs(2);
        let pm = pixel_probs(&[0.1, 0.2, 0.7]);
        let lbl = open_set_pseudo_label(&pm, &space, 0.5).unwrap();
        assert_eq!(lbl.values, vec![space.unknown_index()]);
    }

    #[test]
    fn open_set_tau_to_zero_never_unknown() {
        let space = cs(2);
        let pm = pixel_probs(&[0.05, 0.15, 0.8]);
        let lbl = open_set_pseudo_label(&pm, &space, 1e-12).unwrap();
        assert_eq!(lbl.values, vec![1]);
    }

    #[test]
    fn closed_set_argmax_over_all_channels() {
        let space = cs(2);
        assert_eq!(
            closed_set_pseudo_label(&pixel_probs(&[0.2, 0.2, 0.6]), &space)
                .unwrap()
                .values,
            vec![space.unknown_index()]
        );
        assert_eq!(
            closed_set_pseudo_label(&pixel_probs(&[0.9, 0.05, 0.05]), &space)
                .unwrap()
                .values,
            vec![0]
        );
    }

    #[test]
    fn ties_break_to_lowest_index() {
        let space = cs(2);
        let third = 1.0 / 3.0;
        let pm = pixel_probs(&[third, third, third]);
        assert_eq!(
            closed_set_pseudo_label(&pm, &space).unwrap().values,
            vec![0]
        );
        assert_eq!(
            open_set_pseudo_label(&pm, &space, 0.2).unwrap().values,
            vec![0]
        );
    }

    #[test]
    fn confidence_weight_counts_strictly_above() {
        // 2x2: three pixels confident, one not.
        let mut pm = ProbMap::new(2, 2, 2);
        let conf = [0.99, 0.99, 0.99, 0.6];
        for (p, &c) in conf.iter().enumerate() {
            pm.probs[p] = c;
            pm.probs[4 + p] = 1.0 - c;
        }
        assert_eq!(confidence_weight(&pm, 0.968), 0.75);

        // All pixels exactly at the threshold count as not confident.
        let mut pm2 = ProbMap::new(2, 2, 2);
        for p in 0..4 {
            pm2.probs[p] = 0.968;
            pm2.probs[4 + p] = 1.0 - 0.968;
        }
        assert_eq!(confidence_weight(&pm2, 0.968), 0.0);

        // All confident.
        let mut pm3 = ProbMap::new(2, 2, 2);
        for p in 0..4 {
            pm3.probs[p] = 0.99;
            pm3.probs[4 + p] = 0.01;
        }
        assert_eq!(confidence_weight(&pm3, 0.968), 1.0);
    }

    #[test]
    fn monotonicity_in_thresholds() {
        let space = cs(3);
        let mut probs = ProbMap::new(4, 8, 8);
        let mut state = 0x243f6a8885a308d3u64;
        for p in 0..64 {
            let mut raw = [0.0f64; 4];
            let mut sum = 0.0;
            for r in raw.iter_mut() {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                *r = ((state >> 33) as f64 / (1u64 << 31) as f64).max(1e-3);
                sum += *r;
            }
            for (c, r) in raw.iter().enumerate() {
                probs.probs[c * 64 + p] = r / sum;
            }
        }
        let mut last_unknown = 0;
        for tau1 in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let lbl = open_set_pseudo_label(&probs, &space, tau1).unwrap();
            let unknowns = lbl.count(space.unknown_index());
            assert!(unknowns >= last_unknown);
            last_unknown = unknowns;
        }
        let mut last_q = f64::INFINITY;
        for tau2 in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let q = confidence_weight(&probs, tau2);
            assert!(q <= last_q);
            last_q = q;
        }
    }
}
