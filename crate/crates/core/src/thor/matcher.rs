use super::features::{FeatureExtractor, FEATURE_RES};
use super::memory::{Admission, Template, TemplateModule};
use super::{ThorConfig, ThorError};
use crate::geometry::{GrayImage, Mask, Rect};

/// Result of matching one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackState {
    pub bbox: Rect,
    pub score: f64,
    pub mask: Mask,
    pub frame_index: u64,
    pub lost: bool,
    /// Index into `TemplateModule::templates()` of the winning template.
    pub template: usize,
}

/// Produces the object mask for a matched box.
pub trait Segmenter {
    fn segment(&self, bbox: &Rect, width: usize, height: usize) -> Mask;
}

/// Marks every pixel inside the box.
#[derive(Clone, Copy, Debug, Default)]
pub struct BoxSegmenter;

impl Segmenter for BoxSegmenter {
    fn segment(&self, bbox: &Rect, width: usize, height: usize) -> Mask {
        let mut mask = Mask::filled(width, height, false);
        let (us, vs) = bbox.pixel_range(width, height);
        for v in vs {
            for u in us.clone() {
                mask.set(u, v, true);
            }
        }
        mask
    }
}

fn parabolic_offset(left: f64, center: f64, right: f64) -> f64 {
    let denom = left - 2.0 * center + right;
    if denom < -1e-12 {
        (0.5 * (left - right) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    }
}

/// Correlates every template against a window of `config.context` times
/// the prior box and returns the best placement. The output box keeps the
/// prior's size and is clamped to the image.
pub fn match_frame(
    frame: &GrayImage,
    module: &TemplateModule,
    prior_bbox: &Rect,
    extractor: &dyn FeatureExtractor,
    segmenter: &dyn Segmenter,
    config: &ThorConfig,
    frame_index: u64,
) -> Result<TrackState, ThorError> {
    if !prior_bbox.is_finite() || prior_bbox.is_empty() {
        return Err(ThorError::InvalidBox(*prior_bbox));
    }
    let size = (prior_bbox.width(), prior_bbox.height());
    let (cu, cv) = prior_bbox.center();
    let window = Rect::from_center(cu, cv, size.0 * config.context, size.1 * config.context);
    let n = extractor.offsets_per_axis(config.context);

    // Identical features share one response map.
    let templates = module.templates();
    let mut unique: Vec<usize> = Vec::new();
    let mut owner = Vec::with_capacity(templates.len());
    for t in &templates {
        match unique.iter().position(|&u| templates[u].feature == t.feature) {
            Some(k) => owner.push(k),
            None => {
                owner.push(unique.len());
                unique.push(owner.len() - 1);
            }
        }
    }
    let feats: Vec<_> = unique.iter().map(|&u| &templates[u].feature).collect();
    let maps = extractor.response_map(frame, &window, size, &feats);

    let mut best = (0usize, 0usize, f64::NEG_INFINITY);
    for (t, &k) in owner.iter().enumerate() {
        for (i, &s) in maps[k].iter().enumerate() {
            if s > best.2 {
                best = (t, i, s);
            }
        }
    }
    let (tmpl, idx, peak) = best;
    let map = &maps[owner[tmpl]];
    let (ox, oy) = (idx % n, idx / n);
    let du = if ox > 0 && ox + 1 < n { parabolic_offset(map[idx - 1], peak, map[idx + 1]) } else { 0.0 };
    let dv = if oy > 0 && oy + 1 < n { parabolic_offset(map[idx - n], peak, map[idx + n]) } else { 0.0 };
    let cell = (size.0 / FEATURE_RES as f64, size.1 / FEATURE_RES as f64);
    let center_u = window.min_u + (ox as f64 + du) * cell.0 + size.0 / 2.0;
    let center_v = window.min_v + (oy as f64 + dv) * cell.1 + size.1 / 2.0;

    let score = if peak.is_finite() { peak.clamp(0.0, 1.0) } else { 0.0 };
    let bbox = Rect::from_center(center_u, center_v, size.0, size.1).clamped(frame.width(), frame.height());
    let lost = score < config.loss_threshold;
    let mask = if lost {
        Mask::filled(frame.width(), frame.height(), false)
    } else {
        segmenter.segment(&bbox, frame.width(), frame.height())
    };
    Ok(TrackState {
        bbox,
        score,
        mask,
        frame_index,
        lost,
        template: tmpl,
    })
}

/// Template module plus extractor, updated after every matched frame.
pub struct ThorTracker {
    module: TemplateModule,
    extractor: Box<dyn FeatureExtractor>,
    config: ThorConfig,
    last_admission: Option<Admission>,
}

impl ThorTracker {
    pub fn new(
        frame: &GrayImage,
        init_bbox: &Rect,
        extractor: Box<dyn FeatureExtractor>,
        config: ThorConfig,
    ) -> Result<Self, ThorError> {
        if !init_bbox.is_finite() || init_bbox.is_empty() {
            return Err(ThorError::InvalidBox(*init_bbox));
        }
        if !(config.context >= 1.0) || !(0.0..=1.0).contains(&config.loss_threshold) {
            return Err(ThorError::InvalidConfig(format!("{config:?}")));
        }
        let init = Template {
            patch: extractor.patch(frame, init_bbox),
            feature: extractor.extract(frame, init_bbox),
            source_frame: 0,
        };
        let module = TemplateModule::new(init, config.lower_bound, config.stm_period)?;
        Ok(Self {
            module,
            extractor,
            config,
            last_admission: None,
        })
    }

    pub fn module(&self) -> &TemplateModule {
        &self.module
    }

    pub fn config(&self) -> &ThorConfig {
        &self.config
    }

    pub fn last_admission(&self) -> Option<Admission> {
        self.last_admission
    }

    pub fn template_from(&self, frame: &GrayImage, bbox: &Rect, frame_index: u64) -> Template {
        Template {
            patch: self.extractor.patch(frame, bbox),
            feature: self.extractor.extract(frame, bbox),
            source_frame: frame_index,
        }
    }

    /// Matches `frame` and, on STM frames where tracking was not lost,
    /// pushes the matched crop into the STM and offers it to the LTM.
    pub fn track(
        &mut self,
        frame: &GrayImage,
        prior_bbox: &Rect,
        frame_index: u64,
        segmenter: &dyn Segmenter,
    ) -> Result<TrackState, ThorError> {
        let state = match_frame(frame, &self.module, prior_bbox, self.extractor.as_ref(), segmenter, &self.config, frame_index)?;
        self.last_admission = None;
        if !state.lost && self.module.is_stm_frame(frame_index) && !state.bbox.is_empty() {
            let candidate = self.template_from(frame, &state.bbox, frame_index);
            self.module.update_stm(candidate.clone(), frame_index);
            if self.module.gamma().is_err() {
                self.module.reset_stm(candidate.clone());
            }
            self.last_admission = Some(self.module.try_admit_ltm(&candidate));
        }
        Ok(state)
    }
}
