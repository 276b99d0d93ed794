//! Most probable class sequences and class-share summaries.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iblt::ProcessedRider;
use crate::model::{Class, DrawSet, RiderDraws, RiderKernels, Theta};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedSequence {
    pub rider_id: String,
    pub classes: Vec<Class>,
    /// Log of the maximised joint probability of classes and choices.
    pub log_joint: f64,
}

/// Relative tolerance under which two path scores count as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

fn tied_or_better(candidate: f64, best: f64) -> bool {
    candidate >= best - TIE_TOLERANCE * best.abs().max(1.0)
}

/// Viterbi decoding on precomputed kernels.
///
/// Among paths whose joint probabilities tie, the lexicographically smallest
/// class sequence is returned. The backward pass computes the best
/// continuation score from every (occasion, class); the forward pass then
/// picks the smallest class that still attains the optimum.
pub fn decode_kernels(k: &RiderKernels, rider_id: &str) -> Result<DecodedSequence> {
    let n = k.emission.len();
    if n == 0 {
        return Err(Error::Validation(format!("rider {rider_id} has no modelling occasions")));
    }
    let ln = |p: f64| p.ln();
    let mut future = vec![[0.0f64; 2]; n];
    for t in (0..n - 1).rev() {
        for s in 0..2 {
            let mut best = f64::NEG_INFINITY;
            for s2 in 0..2 {
                let v = ln(k.transition[t][s][s2]) + ln(k.emission[t + 1][s2]) + future[t + 1][s2];
                best = best.max(v);
            }
            future[t][s] = best;
        }
    }
    let mut classes = Vec::with_capacity(n);
    let mut log_joint = 0.0;
    let mut prev = 0usize;
    for t in 0..n {
        let step = |s: usize| {
            let entry = if t == 0 {
                ln(k.init[s])
            } else {
                ln(k.transition[t - 1][prev][s])
            };
            entry + ln(k.emission[t][s])
        };
        let score = [step(0) + future[t][0], step(1) + future[t][1]];
        let best = score[0].max(score[1]);
        if !best.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite Viterbi score for rider {rider_id} at occasion {}",
                t + 1
            )));
        }
        let s = if tied_or_better(score[0], best) { 0 } else { 1 };
        log_joint += step(s);
        classes.push(Class::from_index(s));
        prev = s;
    }
    Ok(DecodedSequence {
        rider_id: rider_id.to_string(),
        classes,
        log_joint,
    })
}

pub fn decode(rider: &ProcessedRider, theta: &Theta, draws: RiderDraws<'_>) -> Result<DecodedSequence> {
    let k = RiderKernels::compute(rider, theta, draws)?;
    decode_kernels(&k, &rider.rider_id)
}

/// Decodes every rider, in order.
pub fn decode_all(data: &[ProcessedRider], theta: &Theta, draws: &DrawSet) -> Result<Vec<DecodedSequence>> {
    draws.check(data.len(), theta.varrho.len())?;
    data.par_iter()
        .enumerate()
        .map(|(i, r)| decode(r, theta, draws.rider(i)))
        .collect()
}

/// Frequency bands on the total number of occasions `T_I + T`: below
/// `lower`, from `lower` to `upper` inclusive, and above `upper`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShareBands {
    pub lower: usize,
    pub upper: usize,
}

impl Default for ShareBands {
    fn default() -> Self {
        ShareBands { lower: 10, upper: 20 }
    }
}

impl ShareBands {
    pub fn validate(&self) -> Result<()> {
        if self.lower > self.upper {
            return Err(Error::Config(format!(
                "share bands: lower {} exceeds upper {}",
                self.lower, self.upper
            )));
        }
        Ok(())
    }

    pub fn band_of(&self, total: usize) -> usize {
        if total < self.lower {
            0
        } else if total <= self.upper {
            1
        } else {
            2
        }
    }

    pub fn labels(&self) -> [String; 3] {
        [
            format!("total < {}", self.lower),
            format!("{} <= total <= {}", self.lower, self.upper),
            format!("total > {}", self.upper),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShareStatus {
    Ok,
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandShare {
    pub band: String,
    pub riders: usize,
    pub occasions: usize,
    /// Share of occasions decoded as compensatory; absent for empty bands.
    pub compensatory_share: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareReport {
    pub status: ShareStatus,
    pub bands_config: ShareBands,
    pub riders: usize,
    pub occasions: usize,
    pub compensatory_share: Option<f64>,
    pub bands: Vec<BandShare>,
}

/// Compensatory shares overall and by frequency band. `total_occasions[i]`
/// is `T_I + T` of the rider decoded in `decoded[i]`.
pub fn class_share(
    decoded: &[DecodedSequence],
    total_occasions: &[usize],
    bands: ShareBands,
) -> Result<ShareReport> {
    bands.validate()?;
    if decoded.len() != total_occasions.len() {
        return Err(Error::Shape(format!(
            "{} decoded sequences for {} riders",
            decoded.len(),
            total_occasions.len()
        )));
    }
    let mut riders = [0usize; 3];
    let mut occ = [0usize; 3];
    let mut comp = [0usize; 3];
    for (d, &total) in decoded.iter().zip(total_occasions) {
        let b = bands.band_of(total);
        riders[b] += 1;
        occ[b] += d.classes.len();
        comp[b] += d.classes.iter().filter(|c| **c == Class::Compensatory).count();
    }
    let share = |c: usize, n: usize| if n == 0 { None } else { Some(c as f64 / n as f64) };
    let labels = bands.labels();
    let total_occ: usize = occ.iter().sum();
    Ok(ShareReport {
        status: if total_occ == 0 { ShareStatus::Empty } else { ShareStatus::Ok },
        bands_config: bands,
        riders: decoded.len(),
        occasions: total_occ,
        compensatory_share: share(comp.iter().sum(), total_occ),
        bands: (0..3)
            .map(|b| BandShare {
                band: labels[b].clone(),
                riders: riders[b],
                occasions: occ[b],
                compensatory_share: share(comp[b], occ[b]),
            })
            .collect(),
    })
}

/// Writes `rider_id,t,class` rows.
pub fn write_decoded<W: std::io::Write>(decoded: &[DecodedSequence], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let map = |e: csv::Error| Error::Validation(format!("writing decoded classes: {e}"));
    w.write_record(["rider_id", "t", "class"]).map_err(map)?;
    for d in decoded {
        for (t, c) in d.classes.iter().enumerate() {
            w.write_record([d.rider_id.as_str(), &(t + 1).to_string(), &c.label().to_string()])
                .map_err(map)?;
        }
    }
    w.flush().map_err(|e| Error::Validation(format!("writing decoded classes: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kernels(init: [f64; 2], emission: Vec<[f64; 2]>, a: [[f64; 2]; 2]) -> RiderKernels {
        let n = emission.len();
        RiderKernels {
            init,
            emission,
            transition: vec![a; n.saturating_sub(1)],
        }
    }

    fn brute_force(k: &RiderKernels) -> (Vec<usize>, f64) {
        let n = k.emission.len();
        let mut best: Option<(Vec<usize>, f64)> = None;
        for mask in 0..(1usize << n) {
            // bit (n - 1 - t) set means class 2 at t: masks enumerate in lexicographic order
            let path: Vec<usize> = (0..n).map(|t| (mask >> (n - 1 - t)) & 1).collect();
            let mut lj = k.init[path[0]].ln() + k.emission[0][path[0]].ln();
            for t in 1..n {
                lj += k.transition[t - 1][path[t - 1]][path[t]].ln() + k.emission[t][path[t]].ln();
            }
            let better = match &best {
                None => true,
                Some((_, b)) => lj > b + TIE_TOLERANCE * b.abs().max(1.0),
            };
            if better {
                best = Some((path, lj));
            }
        }
        best.unwrap()
    }

    #[test]
    fn single_occasion_is_argmax() {
        let k = kernels([0.3, 0.7], vec![[0.9, 0.2]], [[0.5; 2]; 2]);
        let d = decode_kernels(&k, "a").unwrap();
        assert_eq!(d.classes, vec![Class::Compensatory]);
        assert!((d.log_joint - (0.27f64).ln()).abs() < 1e-14);
    }

    #[test]
    fn ties_prefer_class_one() {
        let k = kernels([0.5, 0.5], vec![[0.4, 0.4]; 4], [[0.5; 2]; 2]);
        let d = decode_kernels(&k, "a").unwrap();
        assert!(d.classes.iter().all(|c| *c == Class::Compensatory));
    }

    #[test]
    fn matches_enumeration_on_fixed_case() {
        let k = RiderKernels {
            init: [0.6, 0.4],
            emission: vec![[0.2, 0.9], [0.8, 0.3], [0.5, 0.5], [0.1, 0.7]],
            transition: vec![[[0.7, 0.3], [0.2, 0.8]], [[0.6, 0.4], [0.5, 0.5]], [[0.9, 0.1], [0.3, 0.7]]],
        };
        let d = decode_kernels(&k, "a").unwrap();
        let (path, lj) = brute_force(&k);
        let got: Vec<usize> = d.classes.iter().map(|c| c.index()).collect();
        assert_eq!(got, path);
        assert!((d.log_joint - lj).abs() < 1e-12);
    }

    #[test]
    fn share_by_hand_count() {
        use Class::*;
        let seq = |id: &str, c: Vec<Class>| DecodedSequence {
            rider_id: id.into(),
            classes: c,
            log_joint: -1.0,
        };
        let decoded = vec![
            seq("a", vec![Compensatory, NonCompensatory]),
            seq("b", vec![Compensatory; 5]),
            seq("c", vec![NonCompensatory, NonCompensatory, Compensatory]),
        ];
        let r = class_share(&decoded, &[8, 15, 30], ShareBands::default()).unwrap();
        assert_eq!(r.status, ShareStatus::Ok);
        assert_eq!(r.occasions, 10);
        assert!((r.compensatory_share.unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(r.bands[0].compensatory_share, Some(0.5));
        assert_eq!(r.bands[1].compensatory_share, Some(1.0));
        assert!((r.bands[2].compensatory_share.unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn all_compensatory_shares_are_one() {
        let decoded: Vec<DecodedSequence> = [5usize, 15, 25]
            .iter()
            .map(|&n| DecodedSequence {
                rider_id: n.to_string(),
                classes: vec![Class::Compensatory; n - 3],
                log_joint: 0.0,
            })
            .collect();
        let r = class_share(&decoded, &[5, 15, 25], ShareBands::default()).unwrap();
        assert!(r.bands.iter().all(|b| b.compensatory_share == Some(1.0)));
    }

    #[test]
    fn empty_input_reports_empty() {
        let r = class_share(&[], &[], ShareBands::default()).unwrap();
        assert_eq!(r.status, ShareStatus::Empty);
        assert_eq!(r.compensatory_share, None);
    }

    #[test]
    fn emission_rescaling_keeps_path() {
        let mut k = RiderKernels {
            init: [0.45, 0.55],
            emission: vec![[0.3, 0.6], [0.7, 0.2], [0.4, 0.45]],
            transition: vec![[[0.8, 0.2], [0.35, 0.65]]; 2],
        };
        let before = decode_kernels(&k, "a").unwrap().classes;
        for e in &mut k.emission[1] {
            *e *= 1e-5;
        }
        assert_eq!(decode_kernels(&k, "a").unwrap().classes, before);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn prob() -> impl Strategy<Value = f64> {
            0.01f64..0.99
        }

        proptest! {
            #[test]
            fn viterbi_matches_brute_force(
                n in 1usize..=8,
                p0 in prob(),
                em in proptest::collection::vec((prob(), prob()), 8),
                tr in proptest::collection::vec((prob(), prob()), 7),
            ) {
                let k = RiderKernels {
                    init: [p0, 1.0 - p0],
                    emission: em[..n].iter().map(|&(a, b)| [a, b]).collect(),
                    transition: tr[..n - 1].iter().map(|&(a, b)| [[a, 1.0 - a], [b, 1.0 - b]]).collect(),
                };
                let d = decode_kernels(&k, "p").unwrap();
                let (path, lj) = brute_force(&k);
                let got: Vec<usize> = d.classes.iter().map(|c| c.index()).collect();
                prop_assert_eq!(got, path);
                prop_assert!((d.log_joint - lj).abs() <= 1e-10 * lj.abs().max(1.0));
            }
        }
    }
}
