//! Labeled datasets, N-way K-shot episode sampling, pseudo query generation
//! and the synthetic cross-domain image generator.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imageaug::{augment, AugmentationConfig, Image, RngStream};
use crate::ppm;

/// Real query images per class when none is given.
pub const DEFAULT_M_QUERY: usize = 15;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassImages {
    pub name: String,
    pub images: Vec<Image>,
}

/// Images grouped by class, tagged with the domain they come from.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    domain: String,
    classes: Vec<ClassImages>,
}

impl LabeledDataset {
    pub fn new(domain: impl Into<String>, classes: Vec<ClassImages>) -> Result<Self> {
        let mut names: Vec<&str> = classes.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Parameter(format!("duplicate class name {:?}", w[0])));
        }
        let mut dims = None;
        for class in &classes {
            if class.images.is_empty() {
                return Err(Error::Capacity(format!("class {:?} has no images", class.name)));
            }
            for img in &class.images {
                let d = (img.channels(), img.height(), img.width());
                if *dims.get_or_insert(d) != d {
                    return Err(Error::Shape(format!(
                        "class {:?} mixes image sizes {:?} and {:?}",
                        class.name,
                        dims.unwrap(),
                        d
                    )));
                }
            }
        }
        Ok(Self {
            domain: domain.into(),
            classes,
        })
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    pub fn classes(&self) -> &[ClassImages] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn image(&self, id: ImageId) -> &Image {
        &self.classes[id.class].images[id.index]
    }

    /// `(channels, height, width)` shared by every image.
    pub fn image_dims(&self) -> Option<(usize, usize, usize)> {
        let img = self.classes.first()?.images.first()?;
        Some((img.channels(), img.height(), img.width()))
    }

    /// SHA-256 over the domain tag, class names and pixel bits.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.domain.as_bytes());
        for class in &self.classes {
            h.update([0u8]);
            h.update(class.name.as_bytes());
            h.update((class.images.len() as u64).to_le_bytes());
            for img in &class.images {
                for d in [img.channels(), img.height(), img.width()] {
                    h.update((d as u64).to_le_bytes());
                }
                for p in img.pixels() {
                    h.update(p.to_bits().to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}

/// Position of an image inside its dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ImageId {
    pub class: usize,
    pub index: usize,
}

/// An episode image; `label` is the episode-local class index.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub label: usize,
    pub source: ImageId,
}

/// An augmented copy of a support image.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoImage {
    pub image: Image,
    pub label: usize,
    /// Index into the episode's support set.
    pub support_index: usize,
}

#[derive(Debug, Default)]
struct QueryGuard {
    sealed: AtomicBool,
    reads: AtomicUsize,
    violations: AtomicUsize,
}

/// One N-way K-shot task.
///
/// The real query set is reachable only through [`Episode::query`], which
/// refuses and counts the attempt while the episode is sealed by
/// [`Episode::seal_query`].
#[derive(Debug)]
pub struct Episode {
    n_way: usize,
    k_shot: usize,
    m_query: usize,
    class_ids: Vec<usize>,
    support: Vec<LabeledImage>,
    query: Vec<LabeledImage>,
    pseudo_query: Vec<PseudoImage>,
    guard: QueryGuard,
}

impl Clone for Episode {
    fn clone(&self) -> Self {
        Self {
            n_way: self.n_way,
            k_shot: self.k_shot,
            m_query: self.m_query,
            class_ids: self.class_ids.clone(),
            support: self.support.clone(),
            query: self.query.clone(),
            pseudo_query: self.pseudo_query.clone(),
            guard: QueryGuard::default(),
        }
    }
}

/// Keeps an episode's real query set sealed until dropped.
pub struct QuerySeal<'a> {
    guard: &'a QueryGuard,
}

impl Drop for QuerySeal<'_> {
    fn drop(&mut self) {
        self.guard.sealed.store(false, Ordering::SeqCst);
    }
}

impl Episode {
    /// Assembles an episode from explicit sets. Labels must lie in `0..n_way`.
    pub fn from_parts(
        class_ids: Vec<usize>,
        k_shot: usize,
        support: Vec<LabeledImage>,
        query: Vec<LabeledImage>,
    ) -> Result<Self> {
        let n_way = class_ids.len();
        let m_query = query.len().checked_div(n_way).unwrap_or(0);
        if support.len() != n_way * k_shot || query.len() != n_way * m_query {
            return Err(Error::Contract(format!(
                "{n_way}-way {k_shot}-shot episode got {} support and {} query images",
                support.len(),
                query.len()
            )));
        }
        for (set, per_class) in [(&support, k_shot), (&query, m_query)] {
            let mut counts = vec![0; n_way];
            for li in set.iter() {
                if li.label >= n_way {
                    return Err(Error::Contract(format!("label {} outside 0..{n_way}", li.label)));
                }
                counts[li.label] += 1;
            }
            if counts.iter().any(|&c| c != per_class) {
                return Err(Error::Contract(format!("unbalanced episode classes {counts:?}")));
            }
        }
        Ok(Self {
            n_way,
            k_shot,
            m_query,
            class_ids,
            support,
            query,
            pseudo_query: Vec::new(),
            guard: QueryGuard::default(),
        })
    }

    pub fn n_way(&self) -> usize {
        self.n_way
    }

    pub fn k_shot(&self) -> usize {
        self.k_shot
    }

    pub fn m_query(&self) -> usize {
        self.m_query
    }

    /// Dataset class index behind each episode label.
    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn support(&self) -> &[LabeledImage] {
        &self.support
    }

    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|s| s.label).collect()
    }

    pub fn pseudo_query(&self) -> &[PseudoImage] {
        &self.pseudo_query
    }

    pub fn pseudo_labels(&self) -> Vec<usize> {
        self.pseudo_query.iter().map(|p| p.label).collect()
    }

    /// The real query set, or [`Error::QueryAccess`] while sealed.
    pub fn query(&self) -> Result<&[LabeledImage]> {
        self.guard.reads.fetch_add(1, Ordering::SeqCst);
        if self.guard.sealed.load(Ordering::SeqCst) {
            self.guard.violations.fetch_add(1, Ordering::SeqCst);
            return Err(Error::QueryAccess);
        }
        Ok(&self.query)
    }

    pub fn seal_query(&self) -> QuerySeal<'_> {
        self.guard.sealed.store(true, Ordering::SeqCst);
        QuerySeal { guard: &self.guard }
    }

    pub fn is_query_sealed(&self) -> bool {
        self.guard.sealed.load(Ordering::SeqCst)
    }

    /// Number of refused query reads so far.
    pub fn query_violations(&self) -> usize {
        self.guard.violations.load(Ordering::SeqCst)
    }

    /// Number of query reads attempted so far, allowed or not.
    pub fn query_reads(&self) -> usize {
        self.guard.reads.load(Ordering::SeqCst)
    }

    /// Dataset positions of support then query images, in episode order.
    pub fn source_ids(&self) -> Vec<ImageId> {
        self.support.iter().chain(&self.query).map(|li| li.source).collect()
    }

    /// Hash of the sampled class and image indices.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.class_ids {
            h.update((*c as u64).to_le_bytes());
        }
        for id in self.source_ids() {
            h.update((id.class as u64).to_le_bytes());
            h.update((id.index as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Uniformly picks `n` classes, then `k + m` distinct images of each; the
/// first `k` become support and the rest query.
pub fn sample_episode(ds: &LabeledDataset, n: usize, k: usize, m: usize, rng: &mut impl Rng) -> Result<Episode> {
    if n == 0 || k == 0 {
        return Err(Error::Parameter(format!("episode needs n ≥ 1 and k ≥ 1, got n={n} k={k}")));
    }
    if ds.num_classes() < n {
        return Err(Error::Capacity(format!(
            "{n}-way episodes need {n} classes, dataset {:?} has {}",
            ds.domain,
            ds.num_classes()
        )));
    }
    if let Some(short) = ds.classes.iter().find(|c| c.images.len() < k + m) {
        return Err(Error::Capacity(format!(
            "class {:?} has {} images, episodes need {} ({k} support + {m} query)",
            short.name,
            short.images.len(),
            k + m
        )));
    }
    let class_ids = index::sample(rng, ds.num_classes(), n).into_vec();
    let mut support = Vec::with_capacity(n * k);
    let mut query = Vec::with_capacity(n * m);
    for (label, &class) in class_ids.iter().enumerate() {
        let picks = index::sample(rng, ds.classes[class].images.len(), k + m).into_vec();
        for (i, &idx) in picks.iter().enumerate() {
            let id = ImageId { class, index: idx };
            let li = LabeledImage {
                image: ds.image(id).clone(),
                label,
                source: id,
            };
            if i < k {
                support.push(li);
            } else {
                query.push(li);
            }
        }
    }
    Ok(Episode {
        n_way: n,
        k_shot: k,
        m_query: m,
        class_ids,
        support,
        query,
        pseudo_query: Vec::new(),
        guard: QueryGuard::default(),
    })
}

/// Pseudo query sizing for one shot count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PqsRule {
    pub k_shot: usize,
    pub sources_per_class: usize,
    pub pseudo_per_source: usize,
}

/// How many pseudo queries each support image yields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PqsPolicy {
    pub rules: Vec<PqsRule>,
    /// Total pseudo set size the fallback rule aims for.
    pub fallback_target: usize,
    pub fallback_cap: usize,
}

impl Default for PqsPolicy {
    fn default() -> Self {
        Self {
            rules: vec![
                PqsRule {
                    k_shot: 5,
                    sources_per_class: 5,
                    pseudo_per_source: 4,
                },
                PqsRule {
                    k_shot: 20,
                    sources_per_class: 20,
                    pseudo_per_source: 2,
                },
                PqsRule {
                    k_shot: 50,
                    sources_per_class: 40,
                    pseudo_per_source: 1,
                },
            ],
            fallback_target: 100,
            fallback_cap: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PqsPlan {
    pub sources_per_class: usize,
    pub pseudo_per_source: usize,
    pub fallback: bool,
}

impl PqsPlan {
    pub fn total(&self, n_way: usize) -> usize {
        n_way * self.sources_per_class * self.pseudo_per_source
    }
}

impl PqsPolicy {
    /// Shot counts without an explicit rule get
    /// `min(cap, ceil(target / (n·k)))` pseudo images per support image.
    pub fn plan(&self, n_way: usize, k_shot: usize) -> PqsPlan {
        if let Some(r) = self.rules.iter().find(|r| r.k_shot == k_shot) {
            return PqsPlan {
                sources_per_class: r.sources_per_class,
                pseudo_per_source: r.pseudo_per_source,
                fallback: false,
            };
        }
        let per = self.fallback_target.div_ceil((n_way * k_shot).max(1)).clamp(1, self.fallback_cap.max(1));
        PqsPlan {
            sources_per_class: k_shot,
            pseudo_per_source: per,
            fallback: true,
        }
    }

    pub fn has_rule(&self, k_shot: usize) -> bool {
        self.rules.iter().any(|r| r.k_shot == k_shot)
    }
}

/// Fills the pseudo query set of `ep` by augmenting support images.
///
/// Each pseudo image gets its own stream keyed by one draw from `rng`, so the
/// result does not depend on generation order.
pub fn build_pseudo_query(
    mut ep: Episode,
    policy: &PqsPolicy,
    cfg: &AugmentationConfig,
    rng: &mut impl Rng,
) -> Result<Episode> {
    cfg.validate()?;
    if ep.support.is_empty() {
        return Err(Error::Contract("episode has no support set".into()));
    }
    let plan = policy.plan(ep.n_way, ep.k_shot);
    if plan.fallback {
        log::debug!(
            "no pseudo query rule for {}-shot; using {} pseudo images per support image",
            ep.k_shot,
            plan.pseudo_per_source
        );
    }
    let key = rng.next_u64();
    let mut pseudo = Vec::with_capacity(plan.total(ep.n_way));
    for label in 0..ep.n_way {
        let members: Vec<usize> = (0..ep.support.len()).filter(|&i| ep.support[i].label == label).collect();
        if members.len() < plan.sources_per_class {
            return Err(Error::Capacity(format!(
                "class {label} has {} support images, pseudo query policy needs {}",
                members.len(),
                plan.sources_per_class
            )));
        }
        let sources: Vec<usize> = if members.len() == plan.sources_per_class {
            members
        } else {
            let mut picked: Vec<usize> = index::sample(rng, members.len(), plan.sources_per_class)
                .into_iter()
                .map(|i| members[i])
                .collect();
            picked.sort_unstable();
            picked
        };
        for &src in &sources {
            for _ in 0..plan.pseudo_per_source {
                let mut stream = RngStream::new(key, pseudo.len() as u64);
                let image = augment(&ep.support[src].image, &mut stream, cfg)?;
                pseudo.push(PseudoImage {
                    image,
                    label,
                    support_index: src,
                });
            }
        }
    }
    ep.pseudo_query = pseudo;
    Ok(ep)
}

/// Parameters of one synthetic image domain.
///
/// Each global class id (`class_offset + c`) owns a fixed radial pattern,
/// invariant to quarter turns and flips, plus a palette. `shift`
/// moves the marginal pixel distribution: lower contrast, a structured
/// background texture, heavier noise, a tinted palette and a tone curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub classes: usize,
    pub images_per_class: usize,
    pub size: usize,
    pub class_offset: usize,
    pub shift: f64,
}

impl DomainSpec {
    pub fn source(classes: usize, images_per_class: usize) -> Self {
        Self {
            name: "synthetic-source".into(),
            classes,
            images_per_class,
            size: 16,
            class_offset: 0,
            shift: 0.0,
        }
    }

    pub fn target(classes: usize, images_per_class: usize) -> Self {
        Self {
            name: "synthetic-target".into(),
            classes,
            images_per_class,
            size: 16,
            class_offset: 1000,
            shift: 1.0,
        }
    }
}

/// Per-image deviation from the class palette.
const COLOR_JITTER: f64 = 0.12;

struct ClassPattern {
    freqs: [f64; 3],
    phases: [f64; 3],
    weights: [f64; 3],
    angular: f64,
    angular_phase_flip: bool,
    fg: [f64; 3],
    bg: [f64; 3],
}

impl ClassPattern {
    fn for_class(global: usize) -> Self {
        let mut rng = RngStream::new(0x5EE_DC1A_55E5u64, global as u64);
        let mut draw3 = |lo: f64, hi: f64| [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)];
        let freqs = draw3(0.6, 3.2);
        let phases = draw3(0.0, 2.0 * PI);
        let weights = draw3(0.3, 1.0);
        let angular = rng.gen_range(0.0..0.8);
        let angular_phase_flip = rng.gen_bool(0.5);
        let fg = random_color(&mut rng);
        let bg = random_color(&mut rng);
        Self {
            freqs,
            phases,
            weights,
            angular,
            angular_phase_flip,
            fg,
            bg,
        }
    }

    /// Intensity in `[0, 1]` at polar coordinates `(r, phi)`, `r` in image radii.
    fn intensity(&self, r: f64, phi: f64) -> f64 {
        let norm: f64 = self.weights.iter().sum();
        let mut v = 0.0;
        for i in 0..3 {
            v += self.weights[i] * (2.0 * PI * self.freqs[i] * r + self.phases[i]).cos();
        }
        let ang = (4.0 * phi).cos() * if self.angular_phase_flip { -1.0 } else { 1.0 };
        let v = v / norm * (1.0 - self.angular * 0.5) + self.angular * 0.5 * ang * (1.0 - r).max(0.0);
        let envelope = (-(r * r) * 1.5).exp();
        (0.5 + 0.5 * v * envelope).clamp(0.0, 1.0)
    }
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)]
}

fn jitter(color: [f64; 3], amount: f64, rng: &mut impl Rng) -> [f64; 3] {
    color.map(|c| (c + rng.gen_range(-amount..amount)).clamp(0.0, 1.0))
}

/// Renders one image of class `global` under the domain's shift.
fn render(pattern: &ClassPattern, size: usize, shift: f64, rng: &mut impl Rng) -> Result<Image> {
    let s = shift.clamp(0.0, 1.0);
    let cx = (size as f64 - 1.0) / 2.0 + rng.gen_range(-1.5..1.5);
    let cy = (size as f64 - 1.0) / 2.0 + rng.gen_range(-1.5..1.5);
    let radius = size as f64 / 2.0 * rng.gen_range(0.9..1.1);
    let fg = jitter(pattern.fg, COLOR_JITTER, rng);
    let bg = jitter(pattern.bg, COLOR_JITTER, rng);
    let tint = [0.85, 0.55, 0.25];
    let contrast = 1.0 - 0.55 * s;
    let noise = 0.03 + 0.09 * s;
    let tone = 1.0 + 0.8 * s;
    let tex_freq = rng.gen_range(1.5..3.5);
    let tex_angle = rng.gen_range(0.0..PI);
    let tex_phase = rng.gen_range(0.0..2.0 * PI);

    let n = size * size;
    let mut pixels = vec![0.0; 3 * n];
    for y in 0..size {
        for x in 0..size {
            let dx = (x as f64 - cx) / radius;
            let dy = (y as f64 - cy) / radius;
            let r = (dx * dx + dy * dy).sqrt();
            let a = pattern.intensity(r, dy.atan2(dx));
            let u = (x as f64 * tex_angle.cos() + y as f64 * tex_angle.sin()) / size as f64;
            let texture = 0.25 * s * (2.0 * PI * tex_freq * u + tex_phase).sin();
            for c in 0..3 {
                let fgc = (1.0 - 0.6 * s) * fg[c] + 0.6 * s * tint[c];
                let base = bg[c] + (fgc - bg[c]) * a;
                let v = 0.5 + contrast * (base - 0.5) + texture + noise * rng.sample::<f64, _>(StandardNormal);
                pixels[c * n + y * size + x] = v.clamp(0.0, 1.0).powf(tone);
            }
        }
    }
    Image::new(3, size, size, pixels)
}

/// Generates a dataset of square RGB images for the given domain.
pub fn generate_synthetic(spec: &DomainSpec, seed: u64) -> Result<LabeledDataset> {
    if spec.classes < 2 {
        return Err(Error::Parameter(format!("need at least 2 classes, got {}", spec.classes)));
    }
    if spec.images_per_class == 0 || spec.size < 2 {
        return Err(Error::Parameter("need at least one image of side ≥ 2 per class".into()));
    }
    let mut classes = Vec::with_capacity(spec.classes);
    for c in 0..spec.classes {
        let global = spec.class_offset + c;
        let pattern = ClassPattern::for_class(global);
        let mut rng = RngStream::new(seed, global as u64);
        let images = (0..spec.images_per_class)
            .map(|_| render(&pattern, spec.size, spec.shift, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        classes.push(ClassImages {
            name: format!("class_{global:04}"),
            images,
        });
    }
    LabeledDataset::new(spec.name.clone(), classes)
}

/// Options for [`load_dataset_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    /// Reject non-square images (quarter-turn rotations need them).
    pub require_square: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { require_square: true }
    }
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    load_dataset_with(path, LoadOptions::default())
}

/// Reads `root/<class>/<image>.ppm`, visiting classes and files in
/// lexicographic order.
pub fn load_dataset_with(path: &Path, opts: LoadOptions) -> Result<LabeledDataset> {
    let load_err = |p: &Path, reason: String| Error::Load {
        path: p.to_path_buf(),
        reason,
    };
    let mut class_dirs = Vec::new();
    for entry in fs::read_dir(path).map_err(|e| load_err(path, e.to_string()))? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            class_dirs.push(entry.path());
        }
    }
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(load_err(path, "no class directories".into()));
    }
    let mut classes = Vec::with_capacity(class_dirs.len());
    let mut dims = None;
    for dir in class_dirs {
        let mut files: Vec<_> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(load_err(&dir, "class directory holds no .ppm images".into()));
        }
        let mut images = Vec::with_capacity(files.len());
        for f in files {
            let img = ppm::read(&f)?;
            if opts.require_square && !img.is_square() {
                return Err(load_err(&f, format!("image is {}x{}, square images are required", img.height(), img.width())));
            }
            let d = (img.height(), img.width());
            if *dims.get_or_insert(d) != d {
                return Err(load_err(&f, format!("image is {}x{}, dataset images are {:?}", d.0, d.1, dims.unwrap())));
            }
            images.push(img);
        }
        let name = dir.file_name().unwrap().to_string_lossy().into_owned();
        classes.push(ClassImages { name, images });
    }
    let domain = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    LabeledDataset::new(domain, classes)
}

/// Writes the dataset as `root/<class>/<index>.ppm`.
pub fn save_dataset(ds: &LabeledDataset, root: &Path) -> Result<()> {
    for class in &ds.classes {
        let dir = root.join(&class.name);
        fs::create_dir_all(&dir)?;
        for (i, img) in class.images.iter().enumerate() {
            ppm::write(&dir.join(format!("{i:05}.ppm")), img)?;
        }
    }
    Ok(())
}
