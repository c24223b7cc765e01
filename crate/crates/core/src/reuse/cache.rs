use crate::transformer::{ActivationTrace, SiteActivation};

/// The base task's projection inputs and outputs for one frame.
///
/// Written once per frame by the base-task pass and only read by sub-tasks.
#[derive(Clone, Debug)]
pub struct BaseActivationCache {
    frame: u64,
    trace: ActivationTrace,
}

impl BaseActivationCache {
    pub fn new(frame: u64, trace: ActivationTrace) -> Self {
        Self { frame, trace }
    }

    pub fn frame(&self) -> u64 {
        self.frame
    }

    pub fn entry(&self, layer: usize, site_index: usize) -> Option<&SiteActivation> {
        self.trace.site(layer, site_index)
    }

    pub fn trace(&self) -> &ActivationTrace {
        &self.trace
    }
}

/// One task's projection activations from the last processed frame.
#[derive(Clone, Debug, Default)]
pub struct TemporalActivationCache {
    frame: Option<u64>,
    trace: ActivationTrace,
}

impl TemporalActivationCache {
    pub fn frame(&self) -> Option<u64> {
        self.frame
    }

    pub fn entry(&self, layer: usize, site_index: usize) -> Option<&SiteActivation> {
        self.frame?;
        self.trace.site(layer, site_index)
    }

    pub fn replace(&mut self, frame: u64, trace: ActivationTrace) {
        self.frame = Some(frame);
        self.trace = trace;
    }

    pub fn trace(&self) -> &ActivationTrace {
        &self.trace
    }
}

/// All caches carried between frames: one temporal cache per task (base
/// first) plus the base cache of the latest frame.
#[derive(Clone, Debug)]
pub struct FrameCaches {
    pub(crate) base: Option<BaseActivationCache>,
    pub(crate) temporal: Vec<TemporalActivationCache>,
    pub(crate) last_frame: Option<u64>,
}

impl FrameCaches {
    pub fn new(task_count: usize) -> Self {
        Self {
            base: None,
            temporal: vec![TemporalActivationCache::default(); task_count],
            last_frame: None,
        }
    }

    pub fn base(&self) -> Option<&BaseActivationCache> {
        self.base.as_ref()
    }

    pub fn temporal(&self, task: usize) -> &TemporalActivationCache {
        &self.temporal[task]
    }

    pub fn last_frame(&self) -> Option<u64> {
        self.last_frame
    }
}
