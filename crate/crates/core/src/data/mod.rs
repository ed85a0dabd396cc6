//! Synthetic dataset generation and on-disk dataset access.
//!
//! Layout per object under the dataset root:
//! `<id>/{complete.pcf, partial_<v>.pcf, view_<v>.pgm, cam_<v>.json,
//! silhouette_<v>.pgm}` plus a root `manifest.csv` with
//! `sample_id,family,n_views` rows. Every file read is recorded in an access
//! log so the weak-supervision protocol can be audited.

mod shapes;

pub use shapes::{gen_shape, ShapeFamily, ShapeSpec};

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::geometry::{normalize_unit_sphere, read_pcf, resample, write_pcf, PointCloud};
use crate::render::{
    binarize, read_pgm, render_silhouette, write_pgm, Camera, GrayImage, RenderConfig, RgbImage,
};

/// Remove the fraction of points most extremal along `view_dir` is handled by
/// [`partialize_view`]; this helper keeps points facing the viewer.
fn facing_mask(pc: &PointCloud, view_dir: [f64; 3], jitter: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let c = pc.centroid();
    let mut kept = Vec::new();
    for (i, p) in pc.points().iter().enumerate() {
        let v = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n < 1e-12 {
            kept.push(i);
            continue;
        }
        let facing = (v[0] * view_dir[0] + v[1] * view_dir[1] + v[2] * view_dir[2]) / n;
        let threshold = rng.random_range(-jitter..jitter);
        if facing >= threshold {
            kept.push(i);
        }
    }
    kept
}

/// Occlusion-style cut: keep points whose direction from the centroid faces
/// the viewer (within a jittered threshold), then resample to `n`.
pub fn partialize_view(
    y: &PointCloud,
    view_dir: [f64; 3],
    n: usize,
    jitter: f64,
    rng: &mut ChaCha8Rng,
) -> PointCloud {
    let mut kept = facing_mask(y, view_dir, jitter, rng);
    if kept.is_empty() {
        kept.push(0);
    }
    resample(&y.select(&kept), n, rng)
}

/// Camera placement and rendering settings for dataset generation.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ViewConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// fx = fy = focal_scale * image_width.
    pub focal_scale: f64,
    pub camera_radius: f64,
    /// Elevations cycled over the view ring, degrees.
    pub elevations_deg: Vec<f64>,
    /// Splat radius used when rendering the dense surface cloud.
    pub rho_gen: f64,
}

impl Default for ViewConfig {
    fn default() -> Self {
        ViewConfig {
            image_height: 224,
            image_width: 224,
            focal_scale: 0.8,
            camera_radius: 2.5,
            elevations_deg: vec![15.0, 30.0],
            rho_gen: 0.025,
        }
    }
}

impl ViewConfig {
    /// Camera `v` of a ring of `n_views` azimuths around the y axis.
    pub fn camera(&self, v: usize, n_views: usize) -> Camera {
        let azimuth = std::f64::consts::TAU * v as f64 / n_views as f64;
        let elev = self.elevations_deg[v % self.elevations_deg.len()].to_radians();
        let r = self.camera_radius;
        let pos = [
            r * elev.cos() * azimuth.cos(),
            r * elev.sin(),
            r * elev.cos() * azimuth.sin(),
        ];
        Camera::look_at(
            pos,
            [0.0; 3],
            [0.0, 1.0, 0.0],
            self.focal_scale * self.image_width as f64,
            self.focal_scale * self.image_width as f64,
            self.image_height,
            self.image_width,
        )
    }

    /// Unit direction from the object toward camera `v`.
    pub fn view_dir(&self, v: usize, n_views: usize) -> [f64; 3] {
        let azimuth = std::f64::consts::TAU * v as f64 / n_views as f64;
        let elev = self.elevations_deg[v % self.elevations_deg.len()].to_radians();
        [
            elev.cos() * azimuth.cos(),
            elev.sin(),
            elev.cos() * azimuth.sin(),
        ]
    }
}

/// Render `n_views` posed silhouette views of a (dense) cloud.
/// Returns (image, camera, silhouette) triples; the grayscale silhouette
/// doubles as the view image.
pub fn render_views(
    y: &PointCloud,
    n_views: usize,
    vc: &ViewConfig,
) -> Result<Vec<(GrayImage, Camera, GrayImage)>> {
    let tape = Tape::new();
    let points = tape.constant(vec![y.len(), 3], y.to_flat())?;
    let rc = RenderConfig {
        rho: vc.rho_gen,
        ..RenderConfig::default()
    };
    let mut out = Vec::with_capacity(n_views);
    for v in 0..n_views {
        let cam = vc.camera(v, n_views);
        let (soft, _) = render_silhouette(&points, &cam, &rc)?;
        let vals = soft.values();
        let sil = GrayImage::new(
            cam.height,
            cam.width,
            vals.iter().map(|&x| if x >= 0.5 { 1.0 } else { 0.0 }).collect(),
        )?;
        out.push((sil.clone(), cam, sil));
    }
    Ok(out)
}

/// Dataset generation settings.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GenConfig {
    pub n_shapes: usize,
    pub n_views: usize,
    /// Cardinality of stored partial and complete clouds.
    pub n_points: usize,
    /// Dense surface samples drawn per shape before resampling.
    pub surface_budget: usize,
    /// Jitter on the facing threshold of the partialization cut.
    pub keep_jitter: f64,
    pub view: ViewConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_shapes: 16,
            n_views: 8,
            n_points: 2048,
            surface_budget: 8192,
            keep_jitter: 0.1,
            view: ViewConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: String,
    pub family: String,
    pub n_views: usize,
}

fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Generate `cfg.n_shapes` objects with views and write them under `root`.
pub fn generate_dataset(root: &Path, cfg: &GenConfig, seed: u64) -> Result<Vec<ManifestRow>> {
    fs::create_dir_all(root)?;
    let mut manifest = Vec::with_capacity(cfg.n_shapes);
    for s in 0..cfg.n_shapes {
        let family = ShapeFamily::ALL[s % ShapeFamily::ALL.len()];
        let id = format!("{}_{s:04}", family.name());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&id));
        let spec = ShapeSpec::sample(family, cfg.surface_budget, &mut rng);
        let dense = gen_shape(&spec, &mut rng);
        let complete = resample(&dense, cfg.n_points, &mut rng).quantize_f32();

        let dir = root.join(&id);
        fs::create_dir_all(&dir)?;
        write_pcf(&complete, &dir.join("complete.pcf"))?;

        // Views render the dense surface; partials cut the complete cloud so
        // the known part of a sample is an exact subset of its ground truth.
        let views = render_views(&dense, cfg.n_views, &cfg.view)?;
        for (v, (img, cam, sil)) in views.iter().enumerate() {
            let partial = partialize_view(
                &complete,
                cfg.view.view_dir(v, cfg.n_views),
                cfg.n_points,
                cfg.keep_jitter,
                &mut rng,
            )
            .quantize_f32();
            write_pcf(&partial, &dir.join(format!("partial_{v}.pcf")))?;
            write_pgm(img, &dir.join(format!("view_{v}.pgm")))?;
            write_pgm(sil, &dir.join(format!("silhouette_{v}.pgm")))?;
            fs::write(dir.join(format!("cam_{v}.json")), cam.to_json())?;
        }
        manifest.push(ManifestRow {
            id,
            family: family.name().to_string(),
            n_views: cfg.n_views,
        });
    }
    let mut csv = String::from("sample_id,family,n_views\n");
    for row in &manifest {
        csv.push_str(&format!("{},{},{}\n", row.id, row.family, row.n_views));
    }
    fs::write(root.join("manifest.csv"), csv)?;
    Ok(manifest)
}

/// Which objects a caller may see.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    All,
}

/// Shared record of every dataset file opened.
#[derive(Debug, Clone, Default)]
pub struct AccessLog(Arc<Mutex<Vec<PathBuf>>>);

impl AccessLog {
    fn record(&self, path: &Path) {
        self.0.lock().expect("access log").push(path.to_path_buf());
    }

    pub fn entries(&self) -> Vec<PathBuf> {
        self.0.lock().expect("access log").clone()
    }
}

/// An on-disk dataset opened for reading.
pub struct Dataset {
    root: PathBuf,
    rows: Vec<ManifestRow>,
    log: AccessLog,
}

/// Lazy handle to one (object, view) sample. The paired image comes from the
/// opposite side of the view ring so the two modalities carry complementary
/// occlusion information.
#[derive(Clone)]
pub struct SampleHandle {
    pub object_id: String,
    pub view: usize,
    pub n_views: usize,
    dir: PathBuf,
    log: AccessLog,
}

impl SampleHandle {
    pub fn id(&self) -> String {
        format!("{}:{}", self.object_id, self.view)
    }

    /// View index whose image/camera accompany this partial cloud.
    pub fn paired_view(&self) -> usize {
        (self.view + self.n_views / 2) % self.n_views
    }

    fn read_cloud(&self, name: &str) -> Result<PointCloud> {
        let path = self.dir.join(name);
        self.log.record(&path);
        read_pcf(&path)
    }

    pub fn partial(&self) -> Result<PointCloud> {
        self.read_cloud(&format!("partial_{}.pcf", self.view))
    }

    pub fn image(&self) -> Result<RgbImage> {
        let path = self.dir.join(format!("view_{}.pgm", self.paired_view()));
        self.log.record(&path);
        Ok(RgbImage::from_gray(&read_pgm(&path)?))
    }

    pub fn camera(&self) -> Result<Camera> {
        let path = self.dir.join(format!("cam_{}.json", self.paired_view()));
        self.log.record(&path);
        let raw = fs::read_to_string(&path).map_err(|e| Error::Ingestion {
            path: path.clone(),
            detail: e.to_string(),
        })?;
        Camera::from_json(&raw)
    }

    pub fn silhouette(&self) -> Result<GrayImage> {
        let path = self
            .dir
            .join(format!("silhouette_{}.pgm", self.paired_view()));
        self.log.record(&path);
        read_pgm(&path)
    }

    /// Complete ground truth. Evaluation only; training code receives
    /// [`TrainSample`] handles that cannot reach this.
    pub fn complete(&self) -> Result<PointCloud> {
        self.read_cloud("complete.pcf")
    }
}

/// Training view of a sample: everything except the complete ground truth.
#[derive(Clone)]
pub struct TrainSample(SampleHandle);

impl TrainSample {
    pub fn id(&self) -> String {
        self.0.id()
    }

    pub fn object_id(&self) -> &str {
        &self.0.object_id
    }

    pub fn partial(&self) -> Result<PointCloud> {
        self.0.partial()
    }

    pub fn image(&self) -> Result<RgbImage> {
        self.0.image()
    }

    pub fn camera(&self) -> Result<Camera> {
        self.0.camera()
    }
}

impl Dataset {
    /// Open a dataset root. A directory without a manifest is an empty
    /// dataset only if it contains no object directories.
    pub fn open(root: &Path) -> Result<Dataset> {
        let manifest = root.join("manifest.csv");
        if !manifest.exists() {
            let has_dirs = root.exists()
                && fs::read_dir(root)?.any(|e| e.map(|e| e.path().is_dir()).unwrap_or(false));
            if has_dirs {
                return Err(Error::Schema {
                    path: manifest,
                    detail: "object directories present but manifest.csv missing".into(),
                });
            }
            return Ok(Dataset {
                root: root.to_path_buf(),
                rows: vec![],
                log: AccessLog::default(),
            });
        }
        let raw = fs::read_to_string(&manifest)?;
        let mut rows = Vec::new();
        for (lineno, line) in raw.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(Error::Schema {
                    path: manifest.clone(),
                    detail: format!("line {}: expected 3 fields, got {}", lineno + 1, fields.len()),
                });
            }
            let n_views = fields[2].trim().parse().map_err(|_| Error::Schema {
                path: manifest.clone(),
                detail: format!("line {}: bad view count {:?}", lineno + 1, fields[2]),
            })?;
            rows.push(ManifestRow {
                id: fields[0].trim().to_string(),
                family: fields[1].trim().to_string(),
                n_views,
            });
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            rows,
            log: AccessLog::default(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn rows(&self) -> &[ManifestRow] {
        &self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn access_log(&self) -> Vec<PathBuf> {
        self.log.entries()
    }

    /// Objects land in train/test by a stable hash of their id, 80/20.
    pub fn split_of(object_id: &str) -> Split {
        // Avalanche finalizer: similar ids would otherwise clump mod 5.
        let mut h = fnv1a(object_id);
        h ^= h >> 33;
        h = h.wrapping_mul(0xff51afd7ed558ccd);
        h ^= h >> 33;
        h = h.wrapping_mul(0xc4ceb9fe1a85ec53);
        h ^= h >> 33;
        if h % 5 == 4 {
            Split::Test
        } else {
            Split::Train
        }
    }

    /// Expand objects of `split` into per-view sample handles.
    pub fn samples(&self, split: Split) -> Vec<SampleHandle> {
        let mut out = Vec::new();
        for row in &self.rows {
            if split != Split::All && Dataset::split_of(&row.id) != split {
                continue;
            }
            for v in 0..row.n_views {
                out.push(SampleHandle {
                    object_id: row.id.clone(),
                    view: v,
                    n_views: row.n_views,
                    dir: self.root.join(&row.id),
                    log: self.log.clone(),
                });
            }
        }
        out
    }

    /// Train-split samples with the complete ground truth stripped away.
    pub fn train_samples(&self) -> Vec<TrainSample> {
        self.samples(Split::Train).into_iter().map(TrainSample).collect()
    }

    /// Complete-cloud reads that touched train-split objects. A weak
    /// training run must leave this empty.
    pub fn train_complete_reads(&self) -> Vec<PathBuf> {
        self.access_log()
            .into_iter()
            .filter(|p| {
                p.file_name().map(|f| f == "complete.pcf").unwrap_or(false)
                    && p.parent()
                        .and_then(|d| d.file_name())
                        .and_then(|d| d.to_str())
                        .map(|id| Dataset::split_of(id) == Split::Train)
                        .unwrap_or(false)
            })
            .collect()
    }
}

/// One fully loaded sample.
pub struct Sample {
    pub id: String,
    pub partial: PointCloud,
    pub image: RgbImage,
    pub camera: Camera,
    pub complete: Option<PointCloud>,
    pub silhouette: Option<GrayImage>,
}

/// Load every sample of `split` eagerly.
pub fn load_dataset(root: &Path, split: Split) -> Result<Vec<Sample>> {
    let ds = Dataset::open(root)?;
    let mut out = Vec::new();
    for h in ds.samples(split) {
        out.push(Sample {
            id: h.id(),
            partial: h.partial()?,
            image: h.image()?,
            camera: h.camera()?,
            complete: Some(h.complete()?),
            silhouette: Some(h.silhouette()?),
        });
    }
    Ok(out)
}

/// Self-consistency check value: the rendering loss of the complete cloud
/// against the stored view, which generation keeps small.
pub fn sample_render_consistency(sample: &Sample, rc: &RenderConfig) -> Result<f64> {
    let complete = sample
        .complete
        .as_ref()
        .ok_or_else(|| Error::contract("sample_render_consistency", "sample has no complete cloud"))?;
    let tape = Tape::new();
    let points = tape.constant(vec![complete.len(), 3], complete.to_flat())?;
    let (loss, _) = crate::render::render_loss(&points, &sample.image, &sample.camera, rc)?;
    Ok(loss.scalar_value())
}

/// Normalize a freshly generated or externally provided cloud and quantize
/// it for storage.
pub fn canonicalize_cloud(pc: &PointCloud) -> PointCloud {
    let (n, _, _) = normalize_unit_sphere(pc);
    n.quantize_f32()
}

/// RGB views are binarized against the synthetic background to recover the
/// silhouette; exposed for tests that need the same convention.
pub fn silhouette_of_view(img: &RgbImage, rc: &RenderConfig) -> GrayImage {
    binarize(img, rc.background, rc.bin_threshold)
}
