//! The full recognizer: segmentation, quad fitting, refinement, assembly
//! and decoding.

use crate::assembler::{decode, extract_codes, merge_detections, organize_markers, pair_quads, MarkerDetection};
use crate::codec::Dictionary;
use crate::config::DetectorConfig;
use crate::geometry::CameraIntrinsics;
use crate::imgproc::{
    adaptive_threshold_with, downsample_with, label_components_with, open_region, trace_border, GrayImage,
};
use crate::quadfit::{fit_quad, refine_edges, QuadCandidate};

/// Intermediate products of one detection run.
#[derive(Debug, Clone, Default)]
pub struct DetectionReport {
    pub detections: Vec<MarkerDetection>,
    pub regions: usize,
    /// Quads after the coverage filter, in full-resolution (and, with
    /// intrinsics, undistorted) pixels.
    pub quads: Vec<QuadCandidate>,
    pub subregions: usize,
    pub clusters: usize,
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub config: DetectorConfig,
    pub dictionary: Dictionary,
    /// With distortion terms, corners are reported undistorted.
    pub intrinsics: Option<CameraIntrinsics>,
}

impl Detector {
    pub fn new(dictionary: Dictionary, config: DetectorConfig) -> Self {
        Self {
            config,
            dictionary,
            intrinsics: None,
        }
    }

    pub fn with_intrinsics(mut self, k: CameraIntrinsics) -> Self {
        self.intrinsics = Some(k);
        self
    }

    pub fn detect(&self, img: &GrayImage) -> Vec<MarkerDetection> {
        self.detect_report(img).detections
    }

    /// Quads of `img` in full-resolution pixels.
    pub fn find_quads(&self, img: &GrayImage) -> (Vec<QuadCandidate>, usize) {
        let cfg = &self.config;
        let (small, scale) = if cfg.downsample_min_side > 0 {
            downsample_with(img, cfg.downsample_min_side)
        } else {
            (img.clone(), 1)
        };
        let bin = adaptive_threshold_with(&small, &cfg.threshold);
        let regions = label_components_with(&bin, &cfg.area);
        let n = regions.len();
        let quads = regions
            .iter()
            .filter_map(|r| {
                let r = open_region(r)?;
                if r.area() < cfg.area.min_area {
                    return None;
                }
                let chain = trace_border(&r).ok()?;
                let q = fit_quad(&chain, &r, &cfg.fit).ok()?;
                if q.rac > cfg.fit.t_rac {
                    return None;
                }
                let q = q.upscaled(scale);
                Some(if cfg.refine {
                    refine_edges(&q, img, &cfg.refinement)
                } else {
                    q
                })
            })
            .collect();
        (quads, n)
    }

    pub fn detect_report(&self, img: &GrayImage) -> DetectionReport {
        let cfg = &self.config;
        let (mut quads, regions) = self.find_quads(img);
        if let Some(k) = self.intrinsics.filter(|k| k.has_distortion()) {
            for q in &mut quads {
                q.corners = q.corners.map(|c| k.undistort_pixel(&c));
            }
        }
        let subs = pair_quads(&quads, &cfg.pairing);
        let clusters = organize_markers(&subs, &cfg.organize);
        let detections = clusters
            .iter()
            .filter_map(|c| {
                let runs = extract_codes(&subs, c, &cfg.organize, &cfg.categories);
                decode(&runs, &self.dictionary).ok()
            })
            .collect();
        DetectionReport {
            detections: merge_detections(detections),
            regions,
            quads,
            subregions: subs.len(),
            clusters: clusters.len(),
        }
    }
}

/// Writes detections of one image as text blocks.
pub fn detections_to_text(dets: &[MarkerDetection]) -> String {
    dets.iter().map(|d| d.to_text()).collect()
}
