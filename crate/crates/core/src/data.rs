//! Synthetic multi-source scenes, patch and tile extraction, dataset files.
//!
//! A scene is a grid of square cells. Every cell carries a class and one
//! symbol per modality; each modality encodes its symbol as the signal
//! level `(s + 0.5) / classes` times a fixed positive channel profile. In
//! `separable` scenes every symbol equals the class. In `cross_modal`
//! scenes the symbols of all but the last modality are free and the last
//! one is chosen so that the symbols sum to the class modulo the class
//! count, so no single modality says anything about the label.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{parse_list, Config};
use crate::error::{invalid, Error, Result};
use crate::tensor::{self, Tensor};
use crate::training::normalize_channels;

pub const IGNORE: i64 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SignalKind {
    SpectralSmooth,
    ElevationLike,
    TextureLike,
}

impl SignalKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "spectral_smooth" => Ok(Self::SpectralSmooth),
            "elevation_like" => Ok(Self::ElevationLike),
            "texture_like" => Ok(Self::TextureLike),
            _ => invalid(format!("unknown signal kind {s:?}")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::SpectralSmooth => "spectral_smooth",
            Self::ElevationLike => "elevation_like",
            Self::TextureLike => "texture_like",
        }
    }

    /// Positive profile of channel `j` of `c` at pixel `(y, x)`.
    fn profile(self, j: usize, c: usize, y: usize, x: usize) -> f64 {
        match self {
            Self::SpectralSmooth => 0.6 + 0.4 * (std::f64::consts::PI * (j + 1) as f64 / (c + 1) as f64).sin(),
            Self::ElevationLike => 0.5 + 0.5 * (j + 1) as f64 / c as f64,
            Self::TextureLike => {
                if (x + y + j).is_multiple_of(2) {
                    1.0
                } else {
                    0.7
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalitySpec {
    pub name: String,
    pub channels: usize,
    pub kind: SignalKind,
    pub noise: f64,
}

impl ModalitySpec {
    pub fn new(name: &str, channels: usize, kind: SignalKind, noise: f64) -> Self {
        Self { name: name.to_string(), channels, kind, noise }
    }

    /// Parses `name:channels:kind:noise`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        let [name, channels, kind, noise] = parts[..] else {
            return invalid(format!("modality {s:?} is not name:channels:kind:noise"));
        };
        let channels = channels.parse().map_err(|_| Error::InvalidArgument(format!("bad channel count in {s:?}")))?;
        let noise = noise.parse().map_err(|_| Error::InvalidArgument(format!("bad noise level in {s:?}")))?;
        Ok(Self::new(name, channels, SignalKind::parse(kind)?, noise))
    }

    pub fn to_text(&self) -> String {
        format!("{}:{}:{}:{}", self.name, self.channels, self.kind.name(), self.noise)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Fusion {
    Separable,
    CrossModal,
}

impl Fusion {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "separable" => Ok(Self::Separable),
            "cross_modal" => Ok(Self::CrossModal),
            _ => invalid(format!("unknown fusion difficulty {s:?}")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Separable => "separable",
            Self::CrossModal => "cross_modal",
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    pub modalities: Vec<ModalitySpec>,
    pub classes: usize,
    pub size: usize,
    pub cell: usize,
    pub seed: u64,
    pub fusion: Fusion,
    pub segmentation: bool,
    pub train_fraction: f64,
    /// Fraction of cells left unlabelled.
    pub ignore_fraction: f64,
}

impl GenSpec {
    pub fn new(modalities: Vec<ModalitySpec>, classes: usize, size: usize, seed: u64, fusion: Fusion) -> Self {
        Self {
            modalities,
            classes,
            size,
            cell: 8,
            seed,
            fusion,
            segmentation: false,
            train_fraction: 0.5,
            ignore_fraction: 0.0,
        }
    }

    /// Reads `data.*` keys; defaults describe a two-source, four-class scene.
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let modalities = match cfg.get("data.modalities") {
            Some(list) => list.split(',').map(|m| ModalitySpec::parse(m.trim())).collect::<Result<Vec<_>>>()?,
            None => vec![
                ModalitySpec::new("spectral", 5, SignalKind::SpectralSmooth, 0.0),
                ModalitySpec::new("elevation", 3, SignalKind::ElevationLike, 0.0),
            ],
        };
        let fusion = Fusion::parse(cfg.get("data.fusion").unwrap_or("cross_modal"))?;
        let mut spec = Self::new(
            modalities,
            cfg.parse_or("data.classes", 4)?,
            cfg.parse_or("data.size", 128)?,
            cfg.parse_or("data.seed", 0)?,
            fusion,
        );
        spec.cell = cfg.parse_or("data.cell", 8)?;
        spec.segmentation = match cfg.get("data.task").unwrap_or("patch") {
            "patch" => false,
            "segmentation" => true,
            other => return Err(Error::Usage(format!("unknown data.task {other:?}"))),
        };
        spec.train_fraction = cfg.parse_or("data.train_fraction", 0.5)?;
        if spec.segmentation {
            spec.ignore_fraction = 0.1;
        }
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() || self.modalities.iter().any(|m| m.channels == 0 || m.noise < 0.0) {
            return invalid("every modality needs at least one channel and a non-negative noise level");
        }
        if self.classes < 2 {
            return invalid("at least two classes are needed");
        }
        if self.cell == 0 || self.size == 0 || !self.size.is_multiple_of(self.cell) {
            return invalid(format!("size {} is not a positive multiple of the cell size {}", self.size, self.cell));
        }
        if self.segmentation && !self.size.is_multiple_of(16) {
            return invalid(format!("segmentation scenes need a size divisible by 16, got {}", self.size));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) || !(0.0..1.0).contains(&self.ignore_fraction) {
            return invalid("train and ignore fractions must lie in (0, 1) and [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    /// `C x H x W`, modality channels stacked in manifest order.
    pub image: Tensor,
    /// `H x W`, `IGNORE` for unlabelled pixels.
    pub labels: Vec<i64>,
    pub classes: usize,
    pub class_names: Vec<String>,
    pub modalities: Vec<ModalitySpec>,
    pub cell: usize,
    pub fusion: Fusion,
    pub seed: u64,
    pub train_cells: Vec<usize>,
    pub test_cells: Vec<usize>,
    /// `informative[c][m]`: modality `m` alone identifies class `c`.
    pub informative: Vec<Vec<bool>>,
}

pub fn generate(spec: &GenSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (c, m) = (spec.classes, spec.modalities.len());
    let per_side = spec.size / spec.cell;
    let n_cells = per_side * per_side;

    let mut order: Vec<usize> = (0..n_cells).collect();
    order.shuffle(&mut rng);
    let mut cell_class = vec![0usize; n_cells];
    let mut cell_symbols = vec![vec![0usize; m]; n_cells];
    for (t, &cell) in order.iter().enumerate() {
        let class = t % c;
        let symbols = match spec.fusion {
            Fusion::Separable => vec![class; m],
            Fusion::CrossModal => {
                let mut s = Vec::with_capacity(m);
                let mut rest = t / c;
                for _ in 0..m - 1 {
                    s.push(rest % c);
                    rest /= c;
                }
                let used: usize = s.iter().sum();
                s.push((class + c * m - used % c) % c);
                s
            }
        };
        cell_class[cell] = class;
        cell_symbols[cell] = symbols;
    }

    let n_ignored = (spec.ignore_fraction * n_cells as f64).round() as usize;
    let mut ignored = vec![false; n_cells];
    for &cell in order.choose_multiple(&mut rng, n_ignored) {
        ignored[cell] = true;
    }

    let mut groups: BTreeMap<(usize, Vec<usize>), Vec<usize>> = BTreeMap::new();
    for cell in 0..n_cells {
        if !ignored[cell] {
            groups.entry((cell_class[cell], cell_symbols[cell].clone())).or_default().push(cell);
        }
    }
    let (mut train_cells, mut test_cells) = (Vec::new(), Vec::new());
    for cells in groups.values_mut() {
        cells.shuffle(&mut rng);
        let mut k = (cells.len() as f64 * spec.train_fraction).round() as usize;
        if cells.len() >= 2 {
            k = k.clamp(1, cells.len() - 1);
        }
        train_cells.extend_from_slice(&cells[..k]);
        test_cells.extend_from_slice(&cells[k..]);
    }
    if train_cells.is_empty() || test_cells.is_empty() {
        return invalid(format!(
            "{n_cells} cells leave a split empty; raise data.size or lower data.cell so each class and symbol combination has two cells"
        ));
    }
    train_cells.sort_unstable();
    test_cells.sort_unstable();

    let total: usize = spec.modalities.iter().map(|m| m.channels).sum();
    let (h, w) = (spec.size, spec.size);
    let mut image = vec![0.0; total * h * w];
    let mut ch0 = 0;
    for (mi, ms) in spec.modalities.iter().enumerate() {
        let normal = Normal::new(0.0, ms.noise.max(f64::MIN_POSITIVE)).unwrap();
        for j in 0..ms.channels {
            let plane = &mut image[(ch0 + j) * h * w..(ch0 + j + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let cell = (y / spec.cell) * per_side + x / spec.cell;
                    let level = (cell_symbols[cell][mi] as f64 + 0.5) / c as f64;
                    let noise = if ms.noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                    plane[y * w + x] = level * ms.kind.profile(j, ms.channels, y, x) + noise;
                }
            }
        }
        ch0 += ms.channels;
    }
    let image = Tensor::new(vec![total, h, w], image)?.round_f32();
    let mut labels = vec![IGNORE; h * w];
    for y in 0..h {
        for x in 0..w {
            let cell = (y / spec.cell) * per_side + x / spec.cell;
            if !ignored[cell] {
                labels[y * w + x] = cell_class[cell] as i64;
            }
        }
    }
    let informative = vec![vec![spec.fusion == Fusion::Separable; m]; c];
    Ok(SyntheticDataset {
        image,
        labels,
        classes: c,
        class_names: (0..c).map(|i| format!("class{i}")).collect(),
        modalities: spec.modalities.clone(),
        cell: spec.cell,
        fusion: spec.fusion,
        seed: spec.seed,
        train_cells,
        test_cells,
        informative,
    })
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if n == 1 {
        return 0;
    }
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * n - 2 - i;
        }
    }
    i as usize
}

/// Labelled samples: `x` is `(N, C, h, w)`; `y` holds one label per sample
/// for patches and `h * w` per sample for tiles.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub x: Tensor,
    pub y: Vec<i64>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels_per_sample(&self) -> usize {
        if self.is_empty() {
            1
        } else {
            self.y.len() / self.len()
        }
    }

    /// Samples `idx`, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Result<Samples> {
        let per = self.labels_per_sample();
        let x = self.x.gather_rows(idx)?;
        let y = idx.iter().flat_map(|&i| self.y[i * per..(i + 1) * per].iter().copied()).collect();
        Ok(Samples { x, y })
    }
}

/// Odd-sized patches centred on `centers`, reflect-padded at the borders;
/// each patch takes the label of its centre pixel.
pub fn extract_patches(image: &Tensor, labels: &[i64], patch: usize, centers: &[(usize, usize)]) -> Result<Samples> {
    if patch.is_multiple_of(2) {
        return invalid(format!("patch size must be odd, got {patch}"));
    }
    let [c, h, w] = match image.shape() {
        &[c, h, w] => [c, h, w],
        s => return invalid(format!("expected a C x H x W image, got {s:?}")),
    };
    let r = patch / 2;
    if r >= h || r >= w {
        return invalid(format!("patch {patch} does not fit a {h}x{w} image with reflect padding"));
    }
    if labels.len() != h * w {
        return invalid("label map does not match the image");
    }
    let d = image.data();
    let mut x = Vec::with_capacity(centers.len() * c * patch * patch);
    let mut y = Vec::with_capacity(centers.len());
    for &(cy, cx) in centers {
        if cy >= h || cx >= w {
            return invalid(format!("centre ({cy}, {cx}) outside the image"));
        }
        for ch in 0..c {
            for dy in 0..patch {
                let yy = reflect(cy as isize + dy as isize - r as isize, h);
                for dx in 0..patch {
                    let xx = reflect(cx as isize + dx as isize - r as isize, w);
                    x.push(d[(ch * h + yy) * w + xx]);
                }
            }
        }
        y.push(labels[cy * w + cx]);
    }
    Ok(Samples { x: Tensor::new(vec![centers.len(), c, patch, patch], x)?, y })
}

pub fn all_centers(h: usize, w: usize) -> Vec<(usize, usize)> {
    (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).collect()
}

/// Sliding `tile x tile` windows at `stride`; `((H - t) / s + 1)` per axis.
pub fn extract_tiles(image: &Tensor, labels: &[i64], tile: usize, stride: usize) -> Result<Samples> {
    let [c, h, w] = match image.shape() {
        &[c, h, w] => [c, h, w],
        s => return invalid(format!("expected a C x H x W image, got {s:?}")),
    };
    if tile == 0 || stride == 0 || tile > h || tile > w || labels.len() != h * w {
        return invalid(format!("cannot tile a {h}x{w} image with tile {tile}, stride {stride}"));
    }
    let (ny, nx) = ((h - tile) / stride + 1, (w - tile) / stride + 1);
    let d = image.data();
    let mut x = Vec::with_capacity(ny * nx * c * tile * tile);
    let mut y = Vec::with_capacity(ny * nx * tile * tile);
    for ty in 0..ny {
        for tx in 0..nx {
            let (oy, ox) = (ty * stride, tx * stride);
            for ch in 0..c {
                for yy in oy..oy + tile {
                    x.extend_from_slice(&d[(ch * h + yy) * w + ox..(ch * h + yy) * w + ox + tile]);
                }
            }
            for yy in oy..oy + tile {
                y.extend_from_slice(&labels[yy * w + ox..yy * w + ox + tile]);
            }
        }
    }
    Ok(Samples { x: Tensor::new(vec![ny * nx, c, tile, tile], x)?, y })
}

impl SyntheticDataset {
    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn size(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }

    pub fn modality_widths(&self) -> Vec<usize> {
        self.modalities.iter().map(|m| m.channels).collect()
    }

    fn cells_per_row(&self) -> usize {
        self.size().1 / self.cell
    }

    /// Centre pixel of a cell.
    pub fn cell_center(&self, cell: usize) -> (usize, usize) {
        let per = self.cells_per_row();
        ((cell / per) * self.cell + self.cell / 2, (cell % per) * self.cell + self.cell / 2)
    }

    pub fn cell_of(&self, y: usize, x: usize) -> usize {
        (y / self.cell) * self.cells_per_row() + x / self.cell
    }

    /// Label of every cell (`IGNORE` if unlabelled).
    pub fn cell_labels(&self) -> Vec<i64> {
        let n = self.cells_per_row() * (self.size().0 / self.cell);
        (0..n)
            .map(|cell| {
                let (y, x) = self.cell_center(cell);
                self.labels[y * self.size().1 + x]
            })
            .collect()
    }

    pub fn normalized_image(&self) -> Tensor {
        normalize_channels(&self.image)
    }

    /// Train and test patches centred on the cells of each split.
    pub fn patch_split(&self, patch: usize) -> Result<(Samples, Samples)> {
        let img = self.normalized_image();
        let centers = |cells: &[usize]| cells.iter().map(|&c| self.cell_center(c)).collect::<Vec<_>>();
        Ok((
            extract_patches(&img, &self.labels, patch, &centers(&self.train_cells))?,
            extract_patches(&img, &self.labels, patch, &centers(&self.test_cells))?,
        ))
    }

    /// Label map restricted to the cells of one split.
    pub fn split_labels(&self, cells: &[usize]) -> Vec<i64> {
        let mut keep = vec![false; self.cell_labels().len()];
        for &c in cells {
            keep[c] = true;
        }
        let (h, w) = self.size();
        (0..h * w).map(|p| if keep[self.cell_of(p / w, p % w)] { self.labels[p] } else { IGNORE }).collect()
    }

    /// Train and test tiles; each split sees only its own cells' labels.
    pub fn tile_split(&self, tile: usize, stride: usize) -> Result<(Samples, Samples)> {
        let img = self.normalized_image();
        Ok((
            extract_tiles(&img, &self.split_labels(&self.train_cells), tile, stride)?,
            extract_tiles(&img, &self.split_labels(&self.test_cells), tile, stride)?,
        ))
    }

    fn manifest(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let (h, w) = self.size();
        let informative: Vec<String> = self
            .informative
            .iter()
            .map(|row| row.iter().map(|&b| if b { "1" } else { "0" }).collect::<String>())
            .collect();
        [
            format!("channels={}", self.channels()),
            format!("height={h}"),
            format!("width={w}"),
            format!("classes={}", self.classes),
            format!("class_names={}", self.class_names.join(",")),
            format!("modalities={}", self.modalities.iter().map(ModalitySpec::to_text).collect::<Vec<_>>().join(",")),
            format!("cell={}", self.cell),
            format!("fusion={}", self.fusion),
            format!("seed={}", self.seed),
            format!("informative={}", informative.join(",")),
            format!("train_cells={}", join(&self.train_cells)),
            format!("test_cells={}", join(&self.test_cells)),
        ]
        .join("\n")
            + "\n"
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        tensor::save(&dir.join("image.bin"), &self.image)?;
        let (h, w) = self.size();
        let labels = Tensor::new(vec![h, w], self.labels.iter().map(|&l| l as f64).collect())?;
        tensor::save(&dir.join("labels.bin"), &labels)?;
        fs::write(dir.join("manifest.txt"), self.manifest())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.txt"))?;
        let mut kv = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format(format!("bad manifest line {line:?}")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let field = |k: &str| kv.get(k).map(String::as_str).ok_or_else(|| Error::Format(format!("manifest lacks {k}")));
        let num = |k: &str| -> Result<usize> {
            field(k)?.parse().map_err(|_| Error::Format(format!("manifest field {k} is not a number")))
        };
        let fmt_err = |e: Error| Error::Format(e.to_string());
        let modalities = field("modalities")?
            .split(',')
            .map(|m| ModalitySpec::parse(m).map_err(fmt_err))
            .collect::<Result<Vec<_>>>()?;
        let cells = |k: &str| parse_list::<usize>(field(k)?).map_err(fmt_err);
        let image = tensor::load(&dir.join("image.bin"))?;
        let labels_t = tensor::load(&dir.join("labels.bin"))?;
        let (c, h, w) = (num("channels")?, num("height")?, num("width")?);
        let widths: usize = modalities.iter().map(|m| m.channels).sum();
        if image.shape() != [c, h, w] || widths != c {
            return Err(Error::Format(format!(
                "image shape {:?} disagrees with manifest ({c} channels, modalities sum to {widths}, {h}x{w})",
                image.shape()
            )));
        }
        if labels_t.shape() != [h, w] {
            return Err(Error::Format(format!("label shape {:?} disagrees with {h}x{w}", labels_t.shape())));
        }
        let classes = num("classes")?;
        let informative: Vec<Vec<bool>> =
            field("informative")?.split(',').map(|row| row.chars().map(|ch| ch == '1').collect()).collect();
        let ds = Self {
            image,
            labels: labels_t.data().iter().map(|&v| v as i64).collect(),
            classes,
            class_names: field("class_names")?.split(',').map(str::to_string).collect(),
            modalities,
            cell: num("cell")?,
            fusion: Fusion::parse(field("fusion")?).map_err(fmt_err)?,
            seed: field("seed")?.parse().map_err(|_| Error::Format("bad seed".into()))?,
            train_cells: cells("train_cells")?,
            test_cells: cells("test_cells")?,
            informative,
        };
        if ds.labels.iter().any(|&l| l != IGNORE && (l < 0 || l as usize >= classes)) {
            return Err(Error::Format("label outside the declared classes".into()));
        }
        let n_cells = (h / ds.cell.max(1)) * (w / ds.cell.max(1));
        if ds.cell == 0 || ds.train_cells.iter().chain(&ds.test_cells).any(|&c| c >= n_cells) {
            return Err(Error::Format("split indices outside the cell grid".into()));
        }
        Ok(ds)
    }
}

/// Uniform random draw used by tests and the CLI for quick scenes.
pub fn random_modalities<R: Rng>(rng: &mut R, count: usize) -> Vec<ModalitySpec> {
    let kinds = [SignalKind::SpectralSmooth, SignalKind::ElevationLike, SignalKind::TextureLike];
    (0..count)
        .map(|i| ModalitySpec::new(&format!("m{i}"), rng.gen_range(1..5), kinds[rng.gen_range(0..3)], 0.0))
        .collect()
}
