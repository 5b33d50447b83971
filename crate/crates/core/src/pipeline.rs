//! Frame loop: encode, sample with latent alignment, decode.

use serde::{Deserialize, Serialize};

use crate::attention::KvCache;
use crate::diffusion::{
    build_schedule, sample, standard_normal_grid, AttentionMode, AttentionToy, AttentionToyParams, ConditionToken,
    Denoiser, NoiseSchedule, PatternPull, ScheduleKind, StepContext, Trajectory,
};
use crate::error::{Error, Result};
use crate::flow::{backward_warp_with, compose_flows, downsample_flow, FlowField};
use crate::grid::{average_pool, upsample_bilinear, Boundary, FrameImage, LatentGrid};
use crate::mask::{
    binary_mask, mask_to_latent_res, occlusion_map_with, residual_map_with, BinaryMask, MaskParams, OcclusionMap,
    ResidualMap, UnitMap,
};
use crate::metrics::{token_consistency, warp_error, MetricReport};

/// Offset applied by the codec so mid-grey maps to a zero latent.
pub const LATENT_OFFSET: f32 = 0.5;

/// Where the per-frame blend mask comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    #[default]
    Computed,
    /// Never copy from the previous frame.
    ForceZero,
    /// Copy every cell from the previous frame.
    ForceOne,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DenoiserSpec {
    Pointwise { detail_variance: f32 },
    Attention(AttentionToyParams),
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        Self::Pointwise {
            detail_variance: AttentionToyParams::default().detail_variance,
        }
    }
}

impl DenoiserSpec {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Pointwise { .. } => "pointwise",
            Self::Attention(_) => "attention",
        }
    }

    pub fn build(&self, channels: usize) -> Result<Box<dyn Denoiser>> {
        match self {
            Self::Pointwise { detail_variance } => {
                if !(*detail_variance > 0.0 && detail_variance.is_finite()) {
                    return Err(Error::Validation("detail variance must be positive".into()));
                }
                Ok(Box::new(PatternPull {
                    detail_variance: *detail_variance,
                }))
            }
            Self::Attention(params) => Ok(Box::new(AttentionToy::new(channels, *params)?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub steps: usize,
    /// Alignment runs while `t > t0`.
    pub t0: usize,
    pub mask: MaskParams,
    pub keyframe_interval: usize,
    pub latent_factor: usize,
    pub seed: u64,
    pub schedule: ScheduleKind,
    pub attention: AttentionMode,
    pub denoiser: DenoiserSpec,
    pub condition: ConditionToken,
    pub mask_mode: MaskMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            t0: 4,
            mask: MaskParams::default(),
            keyframe_interval: 10,
            latent_factor: 8,
            seed: 0,
            schedule: ScheduleKind::default(),
            attention: AttentionMode::default(),
            denoiser: DenoiserSpec::default(),
            condition: ConditionToken::default(),
            mask_mode: MaskMode::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Validation("steps must be positive".into()));
        }
        if self.t0 > self.steps {
            return Err(Error::Validation(format!(
                "t0 = {} exceeds steps = {}",
                self.t0, self.steps
            )));
        }
        if self.keyframe_interval == 0 {
            return Err(Error::Validation("key-frame interval must be positive".into()));
        }
        if self.latent_factor == 0 {
            return Err(Error::Validation("latent factor must be positive".into()));
        }
        self.mask.validate()
    }

    /// Steps per frame at which alignment is active.
    pub fn aligned_step_count(&self) -> usize {
        self.steps - self.t0
    }

    pub fn key_indices(&self, frame_count: usize) -> Vec<usize> {
        (0..frame_count).step_by(self.keyframe_interval.max(1)).collect()
    }
}

/// Frames plus exact or estimated flow between consecutive frames.
///
/// `prev_to_cur[j]` lives on frame `j`'s grid and points into frame `j + 1`;
/// `cur_to_prev[j]` lives on frame `j + 1`'s grid and points into frame `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBundle {
    pub frames: Vec<FrameImage>,
    pub prev_to_cur: Vec<FlowField>,
    pub cur_to_prev: Vec<FlowField>,
    pub boundary: Boundary,
    /// Optional ground truth: cell of frame `j + 1` has no source in frame `j`.
    pub disocclusion: Option<Vec<BinaryMask>>,
}

impl SequenceBundle {
    pub fn new(frames: Vec<FrameImage>, prev_to_cur: Vec<FlowField>, cur_to_prev: Vec<FlowField>) -> Result<Self> {
        let bundle = Self {
            frames,
            prev_to_cur,
            cur_to_prev,
            boundary: Boundary::Clamp,
            disocclusion: None,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.frames.len();
        if n == 0 {
            return Err(Error::Validation("sequence has no frames".into()));
        }
        let (h, w) = (self.height(), self.width());
        if let Some(i) = self.frames.iter().position(|f| (f.height(), f.width()) != (h, w)) {
            return Err(Error::dim(format!("frame {i} differs in size from frame 0")));
        }
        for (name, flows) in [("forward", &self.prev_to_cur), ("backward", &self.cur_to_prev)] {
            if flows.len() != n - 1 {
                return Err(Error::Validation(format!(
                    "{n} frames need {} {name} flows, got {}",
                    n - 1,
                    flows.len()
                )));
            }
            if let Some(j) = flows.iter().position(|f| (f.height(), f.width()) != (h, w)) {
                return Err(Error::dim(format!("{name} flow {j} does not match {w}x{h}")));
            }
        }
        if let Some(masks) = &self.disocclusion {
            if masks.len() != n - 1 || masks.iter().any(|m| (m.height(), m.width()) != (h, w)) {
                return Err(Error::Validation("disocclusion masks do not match the sequence".into()));
            }
        }
        Ok(())
    }

    /// Same bundle with every frame snapped to 8-bit levels.
    pub fn quantized(&self) -> Self {
        Self {
            frames: self.frames.iter().map(FrameImage::quantized).collect(),
            ..self.clone()
        }
    }
}

pub fn encode_latent(frame: &FrameImage, factor: usize) -> Result<LatentGrid> {
    average_pool(frame.grid(), factor)?.map(|v| v - LATENT_OFFSET)
}

pub fn decode_latent(latent: &LatentGrid, factor: usize) -> Result<FrameImage> {
    if latent.channels() != 3 {
        return Err(Error::dim(format!(
            "decoding needs a 3-channel latent, got {}",
            latent.channels()
        )));
    }
    FrameImage::from_grid(upsample_bilinear(latent, factor)?.map(|v| v + LATENT_OFFSET)?)
}

/// Blend: cells with `mask = 1` take the previous latent warped along
/// `flow_cur_to_prev`, the rest keep `z`.
pub fn aligned_input(
    z: &LatentGrid,
    prev: &LatentGrid,
    flow_cur_to_prev: &FlowField,
    mask: &BinaryMask,
    boundary: Boundary,
) -> Result<LatentGrid> {
    if !z.same_shape(prev) {
        return Err(Error::dim(format!(
            "latent {:?} and cached latent {:?} differ",
            z.dims(),
            prev.dims()
        )));
    }
    if (mask.height(), mask.width()) != (z.height(), z.width()) {
        return Err(Error::dim("mask does not match latent resolution"));
    }
    let warped = backward_warp_with(prev, flow_cur_to_prev, boundary)?;
    let (c, h, w) = z.dims();
    LatentGrid::from_fn(c, h, w, |ch, y, x| {
        if mask.at(y, x) {
            warped.get(ch, y, x)
        } else {
            z.get(ch, y, x)
        }
    })
}

/// Geometry between two translated frames `prev` and `cur` (`prev < cur`).
#[derive(Debug, Clone, PartialEq)]
pub struct PairGeometry {
    pub prev: usize,
    pub cur: usize,
    /// Composed field on `cur`'s grid pointing into `prev`.
    pub cur_to_prev: FlowField,
    pub occlusion: OcclusionMap,
    pub residual: ResidualMap,
    pub mask: BinaryMask,
    pub latent_flow: FlowField,
    pub latent_mask: BinaryMask,
}

/// Chains per-frame flows and occlusions from `prev` to `cur`.
pub fn pair_geometry(bundle: &SequenceBundle, prev: usize, cur: usize, cfg: &PipelineConfig) -> Result<PairGeometry> {
    if prev >= cur || cur >= bundle.len() {
        return Err(Error::Sequencing(format!(
            "cannot relate frame {cur} to frame {prev} in a {}-frame sequence",
            bundle.len()
        )));
    }
    let (h, w) = (bundle.height(), bundle.width());
    let boundary = bundle.boundary;
    let mut chain = FlowField::zeros(h, w)?;
    let mut occ = vec![1.0f32; h * w];
    for j in (prev + 1..=cur).rev() {
        let hop = occlusion_map_with(&bundle.prev_to_cur[j - 1], boundary)?;
        let pulled = backward_warp_with(&hop.to_grid(), &chain, boundary)?;
        for (o, p) in occ.iter_mut().zip(pulled.data()) {
            *o *= p.clamp(0.0, 1.0);
        }
        chain = compose_flows(&chain, &bundle.cur_to_prev[j - 1], boundary)?;
    }
    let occlusion = UnitMap::new(h, w, occ)?;
    let residual = residual_map_with(&bundle.frames[prev], &bundle.frames[cur], &chain, boundary)?;
    let mask = match cfg.mask_mode {
        MaskMode::Computed => binary_mask(&occlusion, &residual, &cfg.mask)?,
        MaskMode::ForceZero => BinaryMask::filled(h, w, false)?,
        MaskMode::ForceOne => BinaryMask::filled(h, w, true)?,
    };
    let latent_mask = mask_to_latent_res(&mask, cfg.latent_factor)?;
    let latent_flow = downsample_flow(&chain, cfg.latent_factor)?;
    Ok(PairGeometry {
        prev,
        cur,
        cur_to_prev: chain,
        occlusion,
        residual,
        mask,
        latent_flow,
        latent_mask,
    })
}

/// Denoiser inputs of the most recently translated frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCache {
    pub frame_index: usize,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameTranslation {
    pub frame_index: usize,
    pub trajectory: Trajectory,
    /// Decoded output, snapped to 8-bit levels.
    pub frame: FrameImage,
    pub aligned_steps: usize,
    pub geometry: Option<PairGeometry>,
}

impl FrameTranslation {
    pub fn latent(&self) -> &LatentGrid {
        self.trajectory.final_latent()
    }
}

/// Translates frames one at a time, carrying the latent and key/value caches.
pub struct Translator<'d> {
    cfg: PipelineConfig,
    schedule: NoiseSchedule,
    denoiser: &'d dyn Denoiser,
    kv: KvCache,
    cache: Option<LatentCache>,
    order: usize,
}

impl<'d> Translator<'d> {
    pub fn new(cfg: PipelineConfig, denoiser: &'d dyn Denoiser) -> Result<Self> {
        cfg.validate()?;
        let schedule = build_schedule(cfg.steps, cfg.schedule)?;
        Ok(Self {
            cfg,
            schedule,
            denoiser,
            kv: KvCache::new(),
            cache: None,
            order: 0,
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn cache(&self) -> Option<&LatentCache> {
        self.cache.as_ref()
    }

    /// The first call translates the anchor; later calls must move forward.
    pub fn translate_frame(&mut self, bundle: &SequenceBundle, index: usize) -> Result<FrameTranslation> {
        if index >= bundle.len() {
            return Err(Error::Sequencing(format!(
                "frame {index} is outside a {}-frame sequence",
                bundle.len()
            )));
        }
        let geometry = match &self.cache {
            Some(cache) if index <= cache.frame_index => {
                return Err(Error::Sequencing(format!(
                    "frame {index} requested after frame {}",
                    cache.frame_index
                )))
            }
            Some(cache) => Some(pair_geometry(bundle, cache.frame_index, index, &self.cfg)?),
            None => None,
        };
        let factor = self.cfg.latent_factor;
        let control = encode_latent(&bundle.frames[index], factor)?;
        let (c, h, w) = control.dims();
        let sigma_max = self.schedule.sigma(self.schedule.steps());
        let z_init = standard_normal_grid(c, h, w, self.cfg.seed)?.map(|n| (n as f64 * sigma_max) as f32)?;

        let t0 = self.cfg.t0;
        let boundary = bundle.boundary;
        let mut aligned_steps = 0usize;
        let prev = self.cache.as_ref().map(|cache| &cache.trajectory);
        let hook = |t: usize, z: LatentGrid| -> Result<LatentGrid> {
            match (prev, &geometry) {
                (Some(traj), Some(geo)) if t > t0 => {
                    aligned_steps += 1;
                    aligned_input(&z, traj.at(t), &geo.latent_flow, &geo.latent_mask, boundary)
                }
                _ => Ok(z),
            }
        };
        let mut ctx = StepContext::new(self.order)
            .with_attention(self.cfg.attention)
            .with_control(&control)
            .with_kv_cache(&mut self.kv);
        let trajectory = sample(
            self.denoiser,
            &z_init,
            &self.schedule,
            &self.cfg.condition,
            &mut ctx,
            hook,
        )?;
        let frame = decode_latent(trajectory.final_latent(), factor)?.quantized();
        self.cache = Some(LatentCache {
            frame_index: index,
            trajectory: trajectory.clone(),
        });
        self.order += 1;
        Ok(FrameTranslation {
            frame_index: index,
            trajectory,
            frame,
            aligned_steps,
            geometry,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: PipelineConfig,
    pub key_indices: Vec<usize>,
    pub translations: Vec<FrameTranslation>,
    /// Latent-resolution fields on the anchor grid pointing into each later
    /// key frame.
    pub anchor_flows: Vec<FlowField>,
    pub metrics: MetricReport,
}

impl RunOutput {
    pub fn frames(&self) -> Vec<FrameImage> {
        self.translations.iter().map(|t| t.frame.clone()).collect()
    }

    pub fn latents(&self) -> Vec<LatentGrid> {
        self.translations.iter().map(|t| t.latent().clone()).collect()
    }
}

/// Translates every key frame in order and scores the result.
pub fn run_video(bundle: &SequenceBundle, cfg: &PipelineConfig, denoiser: &dyn Denoiser) -> Result<RunOutput> {
    bundle.validate()?;
    let keys = cfg.key_indices(bundle.len());
    let mut translator = Translator::new(cfg.clone(), denoiser)?;
    let translations = keys
        .iter()
        .map(|&i| translator.translate_frame(bundle, i))
        .collect::<Result<Vec<_>>>()?;

    let frames: Vec<FrameImage> = translations.iter().map(|t| t.frame.clone()).collect();
    let geos: Vec<&PairGeometry> = translations.iter().filter_map(|t| t.geometry.as_ref()).collect();
    let flows: Vec<FlowField> = geos.iter().map(|g| g.cur_to_prev.clone()).collect();
    let valid = geos
        .iter()
        .map(|g| {
            BinaryMask::new(
                g.occlusion.height(),
                g.occlusion.width(),
                g.occlusion.values().iter().map(|&o| o >= 0.5).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut metrics = warp_error(&frames, &flows, Some(&valid), bundle.boundary)?;

    let anchor_flows = anchor_latent_flows(bundle, &keys, cfg.latent_factor)?;
    let latents: Vec<LatentGrid> = translations.iter().map(|t| t.latent().clone()).collect();
    metrics.token_consistency = token_consistency(&latents, &anchor_flows, bundle.boundary)?;

    Ok(RunOutput {
        config: cfg.clone(),
        key_indices: keys,
        translations,
        anchor_flows,
        metrics,
    })
}

/// Composes forward flows from `keys[0]` to every later key, then moves them
/// to latent resolution.
pub fn anchor_latent_flows(bundle: &SequenceBundle, keys: &[usize], factor: usize) -> Result<Vec<FlowField>> {
    let Some(&anchor) = keys.first() else {
        return Ok(Vec::new());
    };
    let mut out = Vec::with_capacity(keys.len().saturating_sub(1));
    let mut chain = FlowField::zeros(bundle.height(), bundle.width())?;
    let mut at = anchor;
    for &k in &keys[1..] {
        for j in at..k {
            chain = compose_flows(&chain, &bundle.prev_to_cur[j], bundle.boundary)?;
        }
        at = k;
        out.push(downsample_flow(&chain, factor)?);
    }
    Ok(out)
}
