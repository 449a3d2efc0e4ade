use std::collections::VecDeque;
use std::io::{self, Write};
use std::path::Path;

use nalgebra::SMatrix;

use super::features::Feature;
use super::ThorError;
use crate::geometry::GrayImage;

pub const LTM_SIZE: usize = 5;
pub const STM_SIZE: usize = 5;

pub type Gram = SMatrix<f64, 5, 5>;

#[derive(Clone, Debug, PartialEq)]
pub struct Template {
    pub patch: GrayImage,
    pub feature: Feature,
    pub source_frame: u64,
}

/// Outcome of an LTM admission attempt.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Admission {
    pub admitted: bool,
    /// LTM slot that was replaced (never 0).
    pub slot: Option<usize>,
    pub similarity_gate: bool,
    pub volume_before: f64,
    pub volume_after: f64,
}

/// THOR long-term and short-term template memories.
///
/// The LTM keeps the ground-truth template in slot 0 forever and admits new
/// templates only if they are similar enough to it and make the LTM span a
/// larger volume. The STM is a plain FIFO refreshed every `stm_period`
/// frames.
#[derive(Clone, Debug)]
pub struct TemplateModule {
    ltm: Vec<Template>,
    stm: VecDeque<Template>,
    gram_ltm: Gram,
    gram_stm: Gram,
    lower_bound: f64,
    stm_period: u64,
    stm_insertions: u64,
}

pub fn gram_of(features: &[&Feature]) -> Gram {
    let mut g = Gram::zeros();
    for i in 0..5 {
        for j in i..5 {
            let s = features[i].similarity(features[j]);
            g[(i, j)] = s;
            g[(j, i)] = s;
        }
    }
    g
}

/// `√det(G)` with the determinant clamped at 0.
pub fn parallelotope_volume(g: &Gram) -> f64 {
    g.determinant().max(0.0).sqrt()
}

/// `γ = 1 − 2 / (N (N+1) G_max) · Σ_{i<j} G_ij` over an N×N Gram matrix.
pub fn gamma_of(g: &Gram) -> Result<f64, ThorError> {
    let n = 5.0;
    let g_max = g.max();
    if !(g_max > 0.0) {
        return Err(ThorError::DegenerateMemory(g_max));
    }
    let mut upper = 0.0;
    for i in 0..5 {
        for j in i + 1..5 {
            upper += g[(i, j)];
        }
    }
    Ok(1.0 - 2.0 / (n * (n + 1.0) * g_max) * upper)
}

impl TemplateModule {
    /// Fills all ten slots with the initial template.
    pub fn new(init: Template, lower_bound: f64, stm_period: u64) -> Result<Self, ThorError> {
        if !(lower_bound > 0.0 && lower_bound <= 1.0) {
            return Err(ThorError::InvalidConfig(format!("lower bound must be in (0, 1], got {lower_bound}")));
        }
        if stm_period == 0 {
            return Err(ThorError::InvalidConfig("stm_period must be >= 1".into()));
        }
        let ltm = vec![init.clone(); LTM_SIZE];
        let stm: VecDeque<Template> = std::iter::repeat_n(init, STM_SIZE).collect();
        let mut m = Self {
            ltm,
            stm,
            gram_ltm: Gram::zeros(),
            gram_stm: Gram::zeros(),
            lower_bound,
            stm_period,
            stm_insertions: 0,
        };
        m.recompute_grams();
        Ok(m)
    }

    fn recompute_grams(&mut self) {
        self.gram_ltm = gram_of(&self.ltm.iter().map(|t| &t.feature).collect::<Vec<_>>());
        self.gram_stm = gram_of(&self.stm.iter().map(|t| &t.feature).collect::<Vec<_>>());
    }

    pub fn ltm(&self) -> &[Template] {
        &self.ltm
    }

    /// STM templates, oldest first.
    pub fn stm(&self) -> impl Iterator<Item = &Template> {
        self.stm.iter()
    }

    pub fn ground_truth(&self) -> &Template {
        &self.ltm[0]
    }

    pub fn gram_ltm(&self) -> &Gram {
        &self.gram_ltm
    }

    pub fn gram_stm(&self) -> &Gram {
        &self.gram_stm
    }

    pub fn lower_bound(&self) -> f64 {
        self.lower_bound
    }

    pub fn stm_period(&self) -> u64 {
        self.stm_period
    }

    pub fn stm_insertions(&self) -> u64 {
        self.stm_insertions
    }

    /// All ten templates: LTM slots 0..5 then STM oldest to newest.
    pub fn templates(&self) -> Vec<&Template> {
        self.ltm.iter().chain(self.stm.iter()).collect()
    }

    pub fn is_stm_frame(&self, frame_index: u64) -> bool {
        frame_index % self.stm_period == 0
    }

    /// Appends `template` and drops the oldest STM entry when `frame_index`
    /// falls on the update period. Returns whether an insertion happened.
    pub fn update_stm(&mut self, template: Template, frame_index: u64) -> bool {
        if !self.is_stm_frame(frame_index) {
            return false;
        }
        self.stm.pop_front();
        self.stm.push_back(template);
        self.stm_insertions += 1;
        self.gram_stm = gram_of(&self.stm.iter().map(|t| &t.feature).collect::<Vec<_>>());
        true
    }

    /// Replaces the STM with copies of `template` (used after degenerate memory).
    pub fn reset_stm(&mut self, template: Template) {
        self.stm = std::iter::repeat_n(template, STM_SIZE).collect();
        self.gram_stm = gram_of(&self.stm.iter().map(|t| &t.feature).collect::<Vec<_>>());
    }

    pub fn gamma(&self) -> Result<f64, ThorError> {
        gamma_of(&self.gram_stm)
    }

    pub fn ltm_volume(&self) -> f64 {
        parallelotope_volume(&self.gram_ltm)
    }

    /// Admits `candidate` into the LTM when `z_c ⋆ z_1 > l · G_11 − γ` and
    /// replacing some slot other than the ground truth strictly increases
    /// the LTM volume. The slot giving the largest volume is replaced; ties
    /// go to the lowest slot.
    pub fn try_admit_ltm(&mut self, candidate: &Template) -> Admission {
        let volume_before = self.ltm_volume();
        let mut result = Admission {
            admitted: false,
            slot: None,
            similarity_gate: false,
            volume_before,
            volume_after: volume_before,
        };
        let Ok(gamma) = self.gamma() else {
            return result;
        };
        let sim = candidate.feature.similarity(&self.ltm[0].feature);
        result.similarity_gate = sim > self.lower_bound * self.gram_ltm[(0, 0)] - gamma;
        if !result.similarity_gate {
            return result;
        }
        let mut best: Option<(usize, f64, Gram)> = None;
        for slot in 1..LTM_SIZE {
            let mut g = self.gram_ltm;
            for j in 0..LTM_SIZE {
                let s = if j == slot {
                    candidate.feature.similarity(&candidate.feature)
                } else {
                    candidate.feature.similarity(&self.ltm[j].feature)
                };
                g[(slot, j)] = s;
                g[(j, slot)] = s;
            }
            let vol = parallelotope_volume(&g);
            if best.as_ref().is_none_or(|b| vol > b.1) {
                best = Some((slot, vol, g));
            }
        }
        let (slot, vol, g) = best.expect("at least one replaceable slot");
        if vol > volume_before {
            self.ltm[slot] = candidate.clone();
            self.gram_ltm = g;
            result.admitted = true;
            result.slot = Some(slot);
            result.volume_after = vol;
        }
        result
    }

    /// Writes every template as `ltm{i}.pgm` / `stm{i}.pgm` plus a
    /// `features.txt` sidecar (`name source_frame v0 v1 ...` per line).
    pub fn dump(&self, dir: &Path) -> io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut sidecar = io::BufWriter::new(std::fs::File::create(dir.join("features.txt"))?);
        let named = self
            .ltm
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("ltm{i}"), t))
            .chain(self.stm.iter().enumerate().map(|(i, t)| (format!("stm{i}"), t)));
        for (name, t) in named {
            t.patch.write_pgm(io::BufWriter::new(std::fs::File::create(dir.join(format!("{name}.pgm")))?))?;
            write!(sidecar, "{name} {}", t.source_frame)?;
            for v in t.feature.values() {
                write!(sidecar, " {v:.9e}")?;
            }
            writeln!(sidecar)?;
        }
        sidecar.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn basis(dim: usize, k: usize) -> Feature {
        let mut v = vec![0.0; dim];
        v[k] = 1.0;
        Feature::from_values(v)
    }

    fn tmpl(feature: Feature, frame: u64) -> Template {
        Template {
            patch: GrayImage::filled(2, 2, 0.0),
            feature,
            source_frame: frame,
        }
    }

    fn random_feature(rng: &mut ChaCha8Rng, dim: usize) -> Feature {
        Feature::from_values((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn gamma_of_identical_stm_is_one_third() {
        let m = TemplateModule::new(tmpl(basis(8, 0), 0), 0.8, 10).unwrap();
        assert!((m.gamma().unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn gamma_tends_to_one_for_orthogonal_stm() {
        let mut m = TemplateModule::new(tmpl(basis(8, 0), 0), 0.8, 1).unwrap();
        for k in 1..=5 {
            m.update_stm(tmpl(basis(8, k), k as u64), k as u64);
        }
        assert!((m.gamma().unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_stm_is_an_error() {
        let mut g = Gram::zeros();
        g.fill(-0.1);
        assert!(matches!(gamma_of(&g), Err(ThorError::DegenerateMemory(_))));
    }

    #[test]
    fn stm_period_counts_insertions() {
        let mut m = TemplateModule::new(tmpl(basis(8, 0), 0), 0.8, 10).unwrap();
        let inserted = (0..30).filter(|&f| m.update_stm(tmpl(basis(8, 1), f), f)).count();
        assert_eq!(inserted, 3);
    }

    #[test]
    fn five_insertions_flush_initial_template() {
        let mut m = TemplateModule::new(tmpl(basis(8, 0), 0), 0.8, 1).unwrap();
        for k in 1..=5u64 {
            m.update_stm(tmpl(basis(8, k as usize), k), k);
        }
        assert!(m.stm().all(|t| t.source_frame != 0));
        let order: Vec<u64> = m.stm().map(|t| t.source_frame).collect();
        assert_eq!(order, vec![1, 2, 3, 4, 5]);
        assert_eq!(m.stm().count(), STM_SIZE);
    }

    #[test]
    fn stm_gram_matches_pairwise_recompute() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut m = TemplateModule::new(tmpl(random_feature(&mut rng, 16), 0), 0.8, 1).unwrap();
        for f in 1..9 {
            m.update_stm(tmpl(random_feature(&mut rng, 16), f), f);
            let stm: Vec<_> = m.stm().collect();
            for i in 0..5 {
                for j in 0..5 {
                    let direct: f64 = stm[i].feature.values().iter().zip(stm[j].feature.values()).map(|(a, b)| a * b).sum();
                    assert!((m.gram_stm()[(i, j)] - direct).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn duplicate_candidate_adds_no_volume() {
        let mut m = TemplateModule::new(tmpl(basis(8, 0), 0), 0.8, 10).unwrap();
        let a = m.try_admit_ltm(&tmpl(basis(8, 0), 5));
        assert!(a.similarity_gate);
        assert!(!a.admitted);
        assert_eq!(a.volume_before, 0.0);
    }

    #[test]
    fn orthogonal_candidate_fails_similarity_gate() {
        // z_c ⋆ z_1 = 0 and l·G_11 − γ = 0.8 − 1/3 ≈ 0.467, so 0 > 0.467 is false.
        let mut m = TemplateModule::new(tmpl(basis(8, 0), 0), 0.8, 10).unwrap();
        let a = m.try_admit_ltm(&tmpl(basis(8, 1), 5));
        assert!(!a.similarity_gate);
        assert!(!a.admitted);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(TemplateModule::new(tmpl(basis(4, 0), 0), 0.0, 10).is_err());
        assert!(TemplateModule::new(tmpl(basis(4, 0), 0), 0.8, 0).is_err());
    }

    #[test]
    fn dump_writes_pgm_and_sidecar() {
        let dir = std::env::temp_dir().join(format!("thor-dump-{}", std::process::id()));
        let m = TemplateModule::new(tmpl(basis(4, 0), 0), 0.8, 10).unwrap();
        m.dump(&dir).unwrap();
        let text = std::fs::read_to_string(dir.join("features.txt")).unwrap();
        assert_eq!(text.lines().count(), 10);
        assert!(text.starts_with("ltm0 0 1.0"));
        let pgm = std::fs::read(dir.join("stm4.pgm")).unwrap();
        assert!(pgm.starts_with(b"P5\n2 2\n255\n"));
        std::fs::remove_dir_all(dir).ok();
    }
}
