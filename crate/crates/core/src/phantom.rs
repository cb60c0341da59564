//! Deterministic synthetic CT cohort with ground-truth tamper sites.
//!
//! Each slice is a soft body ellipse (soft tissue, ~40 HU) holding two lung
//! ellipses (~-820 HU) with multi-octave value-noise texture and white
//! acquisition noise. Sites are drawn inside the lungs:
//!
//! * FM sites carry a Gaussian-profile lesion plus the generator fingerprint;
//! * FB sites carry the fingerprint only, where a lesion "was removed";
//! * clean (NODULE) sites alternate between a natural lesion and bare lung,
//!   so lesion presence alone never predicts the label.
//!
//! The fingerprint suppresses the high-pass band (pixel minus its Gaussian
//! blur) inside a disk around the site, by a factor proportional to
//! `tamper_signature_strength`.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{
    write_annotations, Annotation, AnnotationTag, CohortError, CohortManifest, Label, PatientEntry,
    PatientInfo, Trial, MANIFEST_SCHEMA_VERSION,
};
use crate::dicom::{write_slice, DicomError, DicomSlice, PixelRepresentation, Rescale, ScanVolume};
use crate::seeding::mix_seed;

const AIR_HU: f64 = -1000.0;
const SOFT_TISSUE_HU: f64 = 40.0;
const LUNG_HU: f64 = -820.0;
const TISSUE_TEXTURE_HU: f64 = 15.0;
const LUNG_TEXTURE_HU: f64 = 30.0;
const NOISE_HU: f64 = 40.0;
const AIR_NOISE_HU: f64 = 5.0;
/// Blur scale separating the fingerprint's high-pass band.
const FINGERPRINT_BLUR_SIGMA: f64 = 1.5;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Dicom(#[from] DicomError),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error("{}: {source}", path.display())]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub seed: u64,
    pub n_patients: usize,
    pub slices_per_patient: usize,
    /// Annotated slices per patient.
    pub sites_per_patient: usize,
    /// (rows, cols).
    pub dims: (u16, u16),
    pub lesion_radius_px: (f64, f64),
    pub lesion_contrast_hu: (f64, f64),
    /// Radius of the fingerprinted disk around each tampered site.
    pub fingerprint_radius_px: f64,
    /// Intensity offset added inside the fingerprinted disk at full strength.
    pub fingerprint_bias_hu: f64,
    /// 0 leaves tampered sites statistically identical to clean ones.
    pub tamper_signature_strength: f64,
    /// Share of patients per tampered class (FB and FM each).
    pub tampered_fraction: f64,
    /// Share of each tampered class assigned to the OPEN trial.
    pub open_fraction: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            seed: 1,
            n_patients: 20,
            slices_per_patient: 12,
            sites_per_patient: 6,
            dims: (512, 512),
            lesion_radius_px: (6.0, 12.0),
            lesion_contrast_hu: (500.0, 900.0),
            fingerprint_radius_px: 32.0,
            fingerprint_bias_hu: 60.0,
            tamper_signature_strength: 1.0,
            tampered_fraction: 0.25,
            open_fraction: 0.4,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::InvalidSpec(m));
        if self.n_patients == 0 || self.slices_per_patient == 0 {
            return bad("need at least one patient and one slice".into());
        }
        if self.sites_per_patient == 0 || self.sites_per_patient > self.slices_per_patient {
            return bad(format!(
                "sites_per_patient {} must be in 1..={}",
                self.sites_per_patient, self.slices_per_patient
            ));
        }
        if self.dims.0 < 64 || self.dims.1 < 64 {
            return bad(format!("dims {:?} below 64x64", self.dims));
        }
        let range_ok = |r: (f64, f64)| r.0.is_finite() && r.1.is_finite() && r.0 <= r.1;
        if !range_ok(self.lesion_radius_px) || self.lesion_radius_px.0 <= 0.0 {
            return bad(format!("lesion radius range {:?}", self.lesion_radius_px));
        }
        if !range_ok(self.lesion_contrast_hu) {
            return bad(format!(
                "lesion contrast range {:?}",
                self.lesion_contrast_hu
            ));
        }
        if !(self.fingerprint_radius_px.is_finite() && self.fingerprint_radius_px >= 1.0) {
            return bad(format!("fingerprint radius {}", self.fingerprint_radius_px));
        }
        if !self.fingerprint_bias_hu.is_finite() {
            return bad(format!("fingerprint bias {}", self.fingerprint_bias_hu));
        }
        if !(0.0..=1.0).contains(&self.tamper_signature_strength) {
            return bad(format!(
                "strength {} outside [0, 1]",
                self.tamper_signature_strength
            ));
        }
        if !(0.0..=0.5).contains(&self.tampered_fraction) {
            return bad(format!(
                "tampered fraction {} outside [0, 0.5]",
                self.tampered_fraction
            ));
        }
        if !(0.0..=1.0).contains(&self.open_fraction) {
            return bad(format!(
                "open fraction {} outside [0, 1]",
                self.open_fraction
            ));
        }
        Ok(())
    }

    /// Number of patients per tampered class.
    pub fn tampered_per_class(&self) -> usize {
        (self.n_patients as f64 * self.tampered_fraction).round() as usize
    }

    /// Class and trial of patient `p`: clean patients first, then FB, then FM;
    /// the last `open_fraction` of each tampered class is OPEN.
    pub fn patient_role(&self, p: usize) -> (Label, Trial) {
        let k = self.tampered_per_class();
        let clean = self.n_patients - 2 * k;
        if p < clean {
            return (Label::Untampered, Trial::Na);
        }
        let (label, pos) = if p < clean + k {
            (Label::Fb, p - clean)
        } else {
            (Label::Fm, p - clean - k)
        };
        let open = ((k as f64 * self.open_fraction).round() as usize).min(k);
        let trial = if pos >= k - open {
            Trial::Open
        } else {
            Trial::Blind
        };
        (label, trial)
    }

    pub fn patient_id(&self, p: usize) -> String {
        format!("PHANTOM-{p:04}")
    }
}

/// One generated site with everything needed to check it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub patient_id: String,
    pub slice_index: usize,
    pub x: i64,
    pub y: i64,
    pub tag: AnnotationTag,
    pub lesion: bool,
    pub lesion_radius_px: f64,
    pub lesion_contrast_hu: f64,
    pub fingerprinted: bool,
}

/// Generator ground truth, written as `ground_truth.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: PhantomSpec,
    pub sites: Vec<Site>,
}

impl GroundTruth {
    pub fn annotations(&self) -> Vec<Annotation> {
        self.sites
            .iter()
            .map(|s| Annotation {
                patient_id: s.patient_id.clone(),
                slice_index: s.slice_index,
                x: s.x,
                y: s.y,
                tag: s.tag,
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub volumes: Vec<ScanVolume>,
    pub annotations: Vec<Annotation>,
    pub manifest: CohortManifest,
    pub truth: GroundTruth,
}

impl Phantom {
    pub fn patient_infos(&self) -> Vec<PatientInfo> {
        self.manifest.patient_infos()
    }

    /// Write DICOM folders, `annotations.csv`, `manifest.json` and
    /// `ground_truth.json` under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), PhantomError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| PhantomError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        self.volumes
            .par_iter()
            .try_for_each(|v| -> Result<(), PhantomError> {
                let sub = dir.join(v.patient_id());
                fs::create_dir_all(&sub).map_err(io(&sub))?;
                for (k, s) in v.slices().iter().enumerate() {
                    let path = sub.join(format!("slice_{k:03}.dcm"));
                    fs::write(&path, write_slice(s)).map_err(io(&path))?;
                }
                Ok(())
            })?;
        let mut csv = Vec::new();
        write_annotations(&mut csv, &self.annotations)?;
        let path = dir.join(&self.manifest.annotations);
        fs::write(&path, csv).map_err(io(&path))?;
        let path = dir.join("manifest.json");
        fs::write(&path, self.manifest.to_json()).map_err(io(&path))?;
        let path = dir.join("ground_truth.json");
        let truth = serde_json::to_string_pretty(&self.truth).expect("ground truth serializes");
        fs::write(&path, truth).map_err(io(&path))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    /// Semi-axis along columns.
    pub ax: f64,
    /// Semi-axis along rows.
    pub ay: f64,
}

impl Ellipse {
    /// Normalized radius: < 1 inside, 1 on the boundary.
    #[inline]
    fn radius(&self, x: f64, y: f64) -> f64 {
        (((x - self.cx) / self.ax).powi(2) + ((y - self.cy) / self.ay).powi(2)).sqrt()
    }

    /// Soft inside-membership with a boundary ramp about `width` pixels wide.
    #[inline]
    fn soft_mask(&self, x: f64, y: f64, width: f64) -> f64 {
        let scale = self.ax.min(self.ay) / width;
        let t = (1.0 - self.radius(x, y)) * scale;
        1.0 / (1.0 + (-t).exp())
    }
}

/// Body and lung outlines of one slice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anatomy {
    pub body: Ellipse,
    pub lungs: [Ellipse; 2],
}

impl Anatomy {
    /// Whether `(x, y)` lies inside either lung (mask value above one half).
    pub fn in_lung(&self, x: f64, y: f64) -> bool {
        self.lungs.iter().any(|l| l.radius(x, y) < 1.0)
    }
}

fn rng_for(spec: &PhantomSpec, patient: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed) ^ patient as u64);
    rng.set_stream(stream);
    rng
}

const STREAM_ANATOMY: u64 = 0;
const STREAM_SITES: u64 = 1;
const STREAM_SLICE_BASE: u64 = 1 << 16;
const STREAM_TEXTURE_BASE: u64 = 1 << 32;

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Outline of slice `k` of patient `p`; recomputable without generating
/// any pixels.
pub fn slice_anatomy(spec: &PhantomSpec, p: usize, k: usize) -> Anatomy {
    let (rows, cols) = (f64::from(spec.dims.0), f64::from(spec.dims.1));
    let mut base = rng_for(spec, p, STREAM_ANATOMY);
    let bcx = cols / 2.0 + uniform(&mut base, -0.003, 0.003) * cols;
    let bcy = rows / 2.0 + uniform(&mut base, -0.003, 0.003) * rows;
    let bax = cols * uniform(&mut base, 0.385, 0.395);
    let bay = rows * uniform(&mut base, 0.285, 0.295);
    let lung_ax = uniform(&mut base, 0.325, 0.335);
    let lung_ay = uniform(&mut base, 0.66, 0.68);

    let mut jitter = rng_for(spec, p, STREAM_SLICE_BASE + k as u64);
    // Lungs widen towards the middle of the stack.
    let phase = (std::f64::consts::PI * (k as f64 + 0.5) / spec.slices_per_patient as f64).sin();
    let grow = 0.85 + 0.15 * phase;
    let body = Ellipse {
        cx: bcx + uniform(&mut jitter, -1.5, 1.5),
        cy: bcy + uniform(&mut jitter, -1.5, 1.5),
        ax: bax * uniform(&mut jitter, 0.98, 1.02),
        ay: bay * uniform(&mut jitter, 0.98, 1.02),
    };
    let lung = |side: f64, jitter: &mut ChaCha8Rng| Ellipse {
        cx: body.cx + side * body.ax * uniform(jitter, 0.43, 0.47),
        cy: body.cy - body.ay * uniform(jitter, 0.02, 0.08),
        ax: body.ax * lung_ax * grow * uniform(jitter, 0.95, 1.05),
        ay: body.ay * lung_ay * grow * uniform(jitter, 0.95, 1.05),
    };
    let left = lung(-1.0, &mut jitter);
    let right = lung(1.0, &mut jitter);
    Anatomy {
        body,
        lungs: [left, right],
    }
}

/// Smoothly interpolated lattice noise in roughly `[-1, 1]`.
fn value_noise(rows: usize, cols: usize, cell: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let gr = rows / cell + 2;
    let gc = cols / cell + 2;
    let lattice: Vec<f64> = (0..gr * gc).map(|_| rng.random_range(-1.0..1.0)).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        let fr = r as f64 / cell as f64;
        let fc = c as f64 / cell as f64;
        let (i, j) = (fr as usize, fc as usize);
        let (tr, tc) = (smooth(fr - i as f64), smooth(fc - j as f64));
        let v = |a: usize, b: usize| lattice[a * gc + b];
        let top = v(i, j) * (1.0 - tc) + v(i, j + 1) * tc;
        let bottom = v(i + 1, j) * (1.0 - tc) + v(i + 1, j + 1) * tc;
        top * (1.0 - tr) + bottom * tr
    })
}

fn texture(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut t = value_noise(rows, cols, 48, rng);
    t.scaled_add(0.5, &value_noise(rows, cols, 24, rng));
    t.scaled_add(0.25, &value_noise(rows, cols, 12, rng));
    t / 1.75
}

/// Separable Gaussian blur with edge clamping.
fn gaussian_blur(img: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let (rows, cols) = img.dim();
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let horiz = Array2::from_shape_fn((rows, cols), |(r, c)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, w)| w * img[[r, clamp(c as i64 + k as i64 - radius, cols)]])
            .sum::<f64>()
            / norm
    });
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, w)| w * horiz[[clamp(r as i64 + k as i64 - radius, rows), c]])
            .sum::<f64>()
            / norm
    })
}

/// Scale the high-pass band inside a disk by `1 - strength` and add
/// `strength * bias` HU, both tapered over the outer 3 px.
fn apply_fingerprint(hu: &mut Array2<f64>, x: f64, y: f64, radius: f64, bias: f64, strength: f64) {
    if strength <= 0.0 {
        return;
    }
    let (rows, cols) = hu.dim();
    let margin = radius + 3.0 * FINGERPRINT_BLUR_SIGMA + 1.0;
    let r0 = (y - margin).floor().max(0.0) as usize;
    let r1 = ((y + margin).ceil() as usize + 1).min(rows);
    let c0 = (x - margin).floor().max(0.0) as usize;
    let c1 = ((x + margin).ceil() as usize + 1).min(cols);
    let patch = hu.slice(ndarray::s![r0..r1, c0..c1]).to_owned();
    let low = gaussian_blur(&patch, FINGERPRINT_BLUR_SIGMA);
    let taper = 3.0_f64.min(radius);
    for r in r0..r1 {
        for c in c0..c1 {
            let d = ((c as f64 - x).powi(2) + (r as f64 - y).powi(2)).sqrt();
            let w = strength * ((radius - d) / taper).clamp(0.0, 1.0);
            if w > 0.0 {
                let l = low[[r - r0, c - c0]];
                hu[[r, c]] = l + (1.0 - w) * (hu[[r, c]] - l) + w * bias;
            }
        }
    }
}

struct SitePlan {
    slice_index: usize,
    x: f64,
    y: f64,
    tag: AnnotationTag,
    lesion: Option<(f64, f64)>,
    fingerprinted: bool,
}

fn plan_sites(spec: &PhantomSpec, p: usize, label: Label) -> Vec<SitePlan> {
    let mut rng = rng_for(spec, p, STREAM_SITES);
    let mut slices =
        index::sample(&mut rng, spec.slices_per_patient, spec.sites_per_patient).into_vec();
    slices.sort_unstable();
    slices
        .into_iter()
        .enumerate()
        .map(|(n, k)| {
            let anatomy = slice_anatomy(spec, p, k);
            let lung = anatomy.lungs[rng.random_range(0..2)];
            // Uniform over the inner 35% of the lung ellipse.
            let rho = 0.35 * rng.random::<f64>().sqrt();
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            let x = (lung.cx + rho * lung.ax * phi.cos()).round();
            let y = (lung.cy + rho * lung.ay * phi.sin()).round();
            let radius = uniform(&mut rng, spec.lesion_radius_px.0, spec.lesion_radius_px.1);
            let contrast = uniform(
                &mut rng,
                spec.lesion_contrast_hu.0,
                spec.lesion_contrast_hu.1,
            );
            let (tag, has_lesion, fingerprinted) = match label {
                Label::Fm => (AnnotationTag::Fm, true, true),
                Label::Fb => (AnnotationTag::Fb, false, true),
                Label::Untampered => (AnnotationTag::Nodule, n % 2 == 0, false),
            };
            SitePlan {
                slice_index: k,
                x,
                y,
                tag,
                lesion: has_lesion.then_some((radius, contrast)),
                fingerprinted,
            }
        })
        .collect()
}

fn render_slice(spec: &PhantomSpec, p: usize, k: usize, sites: &[&SitePlan]) -> Array2<f64> {
    let (rows, cols) = (usize::from(spec.dims.0), usize::from(spec.dims.1));
    let anatomy = slice_anatomy(spec, p, k);
    let mut rng = rng_for(spec, p, STREAM_TEXTURE_BASE + k as u64);
    let tissue_tex = texture(rows, cols, &mut rng);
    let lung_tex = texture(rows, cols, &mut rng);
    let mut hu = Array2::from_shape_fn((rows, cols), |(r, c)| {
        let (x, y) = (c as f64, r as f64);
        let body = anatomy.body.soft_mask(x, y, 2.0);
        let lung = anatomy
            .lungs
            .iter()
            .map(|l| l.soft_mask(x, y, 2.0))
            .fold(0.0, f64::max);
        let tissue = SOFT_TISSUE_HU + TISSUE_TEXTURE_HU * tissue_tex[[r, c]];
        let lung_hu = LUNG_HU + LUNG_TEXTURE_HU * lung_tex[[r, c]];
        let inside = tissue * (1.0 - lung) + lung_hu * lung;
        AIR_HU * (1.0 - body) + inside * body
    });
    for site in sites {
        if let Some((radius, contrast)) = site.lesion {
            let s2 = 2.0 * (radius / 2.0).powi(2);
            let reach = (3.0 * radius).ceil();
            let r0 = (site.y - reach).max(0.0) as usize;
            let r1 = ((site.y + reach) as usize + 1).min(rows);
            let c0 = (site.x - reach).max(0.0) as usize;
            let c1 = ((site.x + reach) as usize + 1).min(cols);
            for r in r0..r1 {
                for c in c0..c1 {
                    let d2 = (c as f64 - site.x).powi(2) + (r as f64 - site.y).powi(2);
                    hu[[r, c]] += contrast * (-d2 / s2).exp();
                }
            }
        }
    }
    for ((r, c), v) in hu.indexed_iter_mut() {
        let body = anatomy.body.soft_mask(c as f64, r as f64, 2.0);
        let sigma = AIR_NOISE_HU + (NOISE_HU - AIR_NOISE_HU) * body;
        let z: f64 = StandardNormal.sample(&mut rng);
        *v += sigma * z;
    }
    for site in sites.iter().filter(|s| s.fingerprinted) {
        apply_fingerprint(
            &mut hu,
            site.x,
            site.y,
            spec.fingerprint_radius_px,
            spec.fingerprint_bias_hu,
            spec.tamper_signature_strength,
        );
    }
    hu
}

fn quantize(hu: &Array2<f64>) -> Vec<u16> {
    hu.iter()
        .map(|&v| (v + 1024.0).round().clamp(0.0, 4095.0) as u16)
        .collect()
}

/// Generate the whole cohort. Output is a pure function of `spec`.
pub fn generate(spec: &PhantomSpec) -> Result<Phantom, PhantomError> {
    spec.validate()?;
    let per_patient: Vec<(ScanVolume, Vec<Site>)> = (0..spec.n_patients)
        .into_par_iter()
        .map(|p| -> Result<_, PhantomError> {
            let id = spec.patient_id(p);
            let (label, _) = spec.patient_role(p);
            let plans = plan_sites(spec, p, label);
            let mut named = Vec::with_capacity(spec.slices_per_patient);
            for k in 0..spec.slices_per_patient {
                let here: Vec<&SitePlan> = plans.iter().filter(|s| s.slice_index == k).collect();
                let hu = render_slice(spec, p, k, &here);
                let slice = DicomSlice::new(
                    id.clone(),
                    k as u32,
                    spec.dims.0,
                    spec.dims.1,
                    PixelRepresentation::Unsigned,
                    Rescale::ct_default(),
                    quantize(&hu),
                )?
                .with_slice_location(Some(-2.5 * k as f64))?;
                named.push((format!("slice_{k:03}"), slice));
            }
            let sites = plans
                .iter()
                .map(|s| Site {
                    patient_id: id.clone(),
                    slice_index: s.slice_index,
                    x: s.x as i64,
                    y: s.y as i64,
                    tag: s.tag,
                    lesion: s.lesion.is_some(),
                    lesion_radius_px: s.lesion.map_or(0.0, |l| l.0),
                    lesion_contrast_hu: s.lesion.map_or(0.0, |l| l.1),
                    fingerprinted: s.fingerprinted,
                })
                .collect();
            Ok((ScanVolume::from_slices(named)?, sites))
        })
        .collect::<Result<_, _>>()?;

    let mut volumes = Vec::with_capacity(per_patient.len());
    let mut sites = Vec::new();
    for (v, s) in per_patient {
        volumes.push(v);
        sites.extend(s);
    }
    let manifest = CohortManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        annotations: "annotations.csv".into(),
        patients: (0..spec.n_patients)
            .map(|p| {
                let (label, trial) = spec.patient_role(p);
                PatientEntry {
                    patient_id: spec.patient_id(p),
                    directory: spec.patient_id(p).into(),
                    trial,
                    label,
                }
            })
            .collect(),
    };
    let truth = GroundTruth {
        spec: spec.clone(),
        sites,
    };
    Ok(Phantom {
        volumes,
        annotations: truth.annotations(),
        manifest,
        truth,
    })
}

/// Sample variance of the high-pass band (pixel minus Gaussian blur)
/// inside a disk, measured on a windowed or HU image.
pub fn highpass_variance(img: &Array2<f64>, x: f64, y: f64, radius: f64) -> f64 {
    let (rows, cols) = img.dim();
    let margin = radius + 3.0 * FINGERPRINT_BLUR_SIGMA + 1.0;
    let r0 = (y - margin).floor().max(0.0) as usize;
    let r1 = ((y + margin).ceil() as usize + 1).min(rows);
    let c0 = (x - margin).floor().max(0.0) as usize;
    let c1 = ((x + margin).ceil() as usize + 1).min(cols);
    let patch = img.slice(ndarray::s![r0..r1, c0..c1]).to_owned();
    let low = gaussian_blur(&patch, FINGERPRINT_BLUR_SIGMA);
    let mut values = Vec::new();
    for r in r0..r1 {
        for c in c0..c1 {
            let d = ((c as f64 - x).powi(2) + (r as f64 - y).powi(2)).sqrt();
            if d <= radius {
                values.push(patch[[r - r0, c - c0]] - low[[r - r0, c - c0]]);
            }
        }
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
}
