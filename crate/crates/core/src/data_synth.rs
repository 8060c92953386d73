//! Procedural shapes scenes: a background colour plus one to three objects
//! on a 3x3 grid. Each scene yields a rendered image, a caption that names
//! only the object count and the first object, and a ten-turn dialogue that
//! fills in everything else.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::imaging::Image;
use crate::rng::{derive_seed, rng_from};

pub const SUPPORTED_RESOLUTIONS: [usize; 5] = [16, 32, 64, 128, 256];
pub const DIALOGUE_TURNS: usize = 10;
pub const MAX_OBJECTS: usize = 3;
pub const GRID: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    White,
    Gray,
}

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::White,
        Color::Gray,
    ];

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, -1.0, -1.0],
            Color::Green => [-1.0, 1.0, -1.0],
            Color::Blue => [-1.0, -1.0, 1.0],
            Color::Yellow => [1.0, 1.0, -1.0],
            Color::White => [1.0, 1.0, 1.0],
            Color::Gray => [0.0, 0.0, 0.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::White => "white",
            Color::Gray => "gray",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_name(s: &str) -> Option<Color> {
        Color::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_name(s: &str) -> Option<Shape> {
        Shape::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];

    pub fn name(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }

    /// Half-extent as a fraction of the grid cell.
    fn half_extent(self) -> f64 {
        match self {
            Size::Small => 0.24,
            Size::Large => 0.44,
        }
    }
}

/// Grid position in `0..9`, row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Cell(u8);

impl Cell {
    pub fn new(index: u8) -> Result<Cell> {
        if (index as usize) < GRID * GRID {
            Ok(Cell(index))
        } else {
            Err(Error::InvalidArgument(format!("cell {index} outside the 3x3 grid")))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn row(self) -> usize {
        self.index() / GRID
    }

    pub fn col(self) -> usize {
        self.index() % GRID
    }

    /// Two-word position phrase, e.g. "top left".
    pub fn phrase(self) -> String {
        const ROWS: [&str; 3] = ["top", "middle", "bottom"];
        const COLS: [&str; 3] = ["left", "center", "right"];
        format!("{} {}", ROWS[self.row()], COLS[self.col()])
    }
}

impl TryFrom<u8> for Cell {
    type Error = Error;

    fn try_from(v: u8) -> Result<Cell> {
        Cell::new(v)
    }
}

impl From<Cell> for u8 {
    fn from(c: Cell) -> u8 {
        c.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    pub cell: Cell,
}

impl ObjectSpec {
    /// Joint (shape, colour) class in `0..18`.
    pub fn class_index(&self) -> usize {
        self.shape.index() * Color::ALL.len() + self.color.index()
    }
}

/// Ground truth of one synthetic scene.
///
/// Invariants: one to three objects, listed in increasing cell order
/// (so "first" means first in reading order), no shared cells, and no
/// object painted in the background colour.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawScene")]
pub struct SceneSpec {
    background: Color,
    objects: Vec<ObjectSpec>,
    seed: u64,
}

#[derive(Deserialize)]
struct RawScene {
    background: Color,
    objects: Vec<ObjectSpec>,
    seed: u64,
}

impl TryFrom<RawScene> for SceneSpec {
    type Error = Error;

    fn try_from(r: RawScene) -> Result<SceneSpec> {
        SceneSpec::new(r.background, r.objects, r.seed)
    }
}

impl SceneSpec {
    pub fn new(background: Color, objects: Vec<ObjectSpec>, seed: u64) -> Result<SceneSpec> {
        if objects.is_empty() || objects.len() > MAX_OBJECTS {
            return Err(Error::InvalidArgument(format!(
                "a scene holds 1 to {MAX_OBJECTS} objects, got {}",
                objects.len()
            )));
        }
        if objects.windows(2).any(|w| w[0].cell >= w[1].cell) {
            return Err(Error::InvalidArgument(
                "objects must occupy distinct cells in increasing order".into(),
            ));
        }
        if objects.iter().any(|o| o.color == background) {
            return Err(Error::InvalidArgument(
                "object colour equals the background colour".into(),
            ));
        }
        Ok(SceneSpec {
            background,
            objects,
            seed,
        })
    }

    pub fn background(&self) -> Color {
        self.background
    }

    pub fn objects(&self) -> &[ObjectSpec] {
        &self.objects
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn first_object(&self) -> &ObjectSpec {
        &self.objects[0]
    }
}

/// Uniform sampler: object count in {1, 2, 3}; distinct cells; attributes
/// uniform over their domains, object colours drawn from the five colours
/// other than the background.
pub fn sample_scene(seed: u64) -> SceneSpec {
    let mut rng = rng_from(seed);
    let background = Color::ALL[rng.gen_range(0..Color::ALL.len())];
    let count = rng.gen_range(1..=MAX_OBJECTS);
    let mut cells: Vec<usize> = sample(&mut rng, GRID * GRID, count).into_vec();
    cells.sort_unstable();
    let palette: Vec<Color> = Color::ALL.into_iter().filter(|c| *c != background).collect();
    let objects = cells
        .into_iter()
        .map(|cell| ObjectSpec {
            shape: Shape::ALL[rng.gen_range(0..Shape::ALL.len())],
            color: palette[rng.gen_range(0..palette.len())],
            size: Size::ALL[rng.gen_range(0..Size::ALL.len())],
            cell: Cell(cell as u8),
        })
        .collect();
    SceneSpec::new(background, objects, seed).expect("sampler upholds scene invariants")
}

fn covers(obj: &ObjectSpec, px: f64, py: f64) -> bool {
    let cell = 1.0 / GRID as f64;
    let cx = (obj.cell.col() as f64 + 0.5) * cell;
    let cy = (obj.cell.row() as f64 + 0.5) * cell;
    let r = obj.size.half_extent() * cell;
    let (dx, dy) = (px - cx, py - cy);
    match obj.shape {
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
        // Apex up; the half-width grows linearly from 0 at the top to r at the base.
        Shape::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
    }
}

/// Point-sampled rendering at pixel centres; no anti-aliasing.
pub fn render_scene(spec: &SceneSpec, resolution: usize) -> Result<Image> {
    if !SUPPORTED_RESOLUTIONS.contains(&resolution) {
        return Err(Error::UnsupportedResolution(resolution));
    }
    let mut img = Image::filled(resolution, spec.background.rgb());
    let step = 1.0 / resolution as f64;
    for y in 0..resolution {
        let py = (y as f64 + 0.5) * step;
        for x in 0..resolution {
            let px = (x as f64 + 0.5) * step;
            if let Some(obj) = spec.objects.iter().rev().find(|o| covers(o, px, py)) {
                img.set_pixel(x, y, obj.color.rgb());
            }
        }
    }
    Ok(img)
}

pub fn caption_of(spec: &SceneSpec) -> String {
    let first = spec.first_object();
    format!(
        "a scene with {} objects, including a {} {}",
        spec.objects.len(),
        first.color.name(),
        first.shape.name()
    )
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Turn {
    #[serde(rename = "q")]
    pub question: String,
    #[serde(rename = "a")]
    pub answer: String,
}

/// Exactly ten non-empty question/answer turns.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Turn>", into = "Vec<Turn>")]
pub struct Dialogue {
    turns: Vec<Turn>,
}

impl Dialogue {
    pub fn new(turns: Vec<Turn>) -> Result<Dialogue> {
        if turns.len() != DIALOGUE_TURNS {
            return Err(Error::InvalidArgument(format!(
                "a dialogue has exactly {DIALOGUE_TURNS} turns, got {}",
                turns.len()
            )));
        }
        if turns
            .iter()
            .any(|t| t.question.trim().is_empty() || t.answer.trim().is_empty())
        {
            return Err(Error::InvalidArgument("dialogue turns must be non-empty".into()));
        }
        Ok(Dialogue { turns })
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    /// Swaps two turns (used to probe order sensitivity of encoders).
    pub fn with_swapped(&self, i: usize, j: usize) -> Dialogue {
        let mut turns = self.turns.clone();
        turns.swap(i, j);
        Dialogue { turns }
    }
}

impl TryFrom<Vec<Turn>> for Dialogue {
    type Error = Error;

    fn try_from(turns: Vec<Turn>) -> Result<Dialogue> {
        Dialogue::new(turns)
    }
}

impl From<Dialogue> for Vec<Turn> {
    fn from(d: Dialogue) -> Vec<Turn> {
        d.turns
    }
}

const ORDINALS: [&str; 3] = ["first", "second", "third"];
pub const PAD_QUESTION: &str = "is there anything else?";
pub const PAD_ANSWER: &str = "no";

fn turn(q: String, a: String) -> Turn {
    Turn { question: q, answer: a }
}

pub fn dialogue_of(spec: &SceneSpec) -> Dialogue {
    let mut turns = vec![turn(
        "what color is the background?".into(),
        spec.background.name().into(),
    )];
    for (i, obj) in spec.objects.iter().enumerate() {
        let ord = ORDINALS[i];
        if i > 0 {
            turns.push(turn(
                format!("what is the {ord} object?"),
                format!("a {} {}", obj.color.name(), obj.shape.name()),
            ));
        }
        turns.push(turn(format!("how big is the {ord} object?"), obj.size.name().into()));
        turns.push(turn(format!("where is the {ord} object?"), obj.cell.phrase()));
    }
    while turns.len() < DIALOGUE_TURNS {
        turns.push(turn(PAD_QUESTION.into(), PAD_ANSWER.into()));
    }
    Dialogue::new(turns).expect("templates produce ten non-empty turns")
}

impl fmt::Display for SceneSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} background", self.background.name())?;
        for o in &self.objects {
            write!(
                f,
                "; {} {} {} at {}",
                o.size.name(),
                o.color.name(),
                o.shape.name(),
                o.cell.phrase()
            )?;
        }
        Ok(())
    }
}

/// One line of `metadata.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetadataRecord {
    pub id: u64,
    pub caption: String,
    pub dialogue: Dialogue,
    pub spec: SceneSpec,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n: usize,
    pub seed: u64,
    pub resolutions: Vec<usize>,
    pub digest: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METADATA_FILE: &str = "metadata.jsonl";
pub const IMAGES_DIR: &str = "images";

pub fn image_path(dir: &Path, resolution: usize, id: u64) -> std::path::PathBuf {
    dir.join(IMAGES_DIR)
        .join(resolution.to_string())
        .join(format!("{id}.png"))
}

/// Content digest over the metadata bytes followed by the 8-bit pixels of
/// every image, resolution-major then id order.
pub struct DigestBuilder(Sha256);

impl DigestBuilder {
    pub fn new(metadata: &[u8]) -> Self {
        let mut h = Sha256::new();
        h.update(metadata);
        DigestBuilder(h)
    }

    pub fn image(&mut self, rgb8: &[u8]) {
        self.0.update(rgb8);
    }

    pub fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

pub fn record_for(id: u64, dataset_seed: u64) -> MetadataRecord {
    let spec = sample_scene(derive_seed(dataset_seed, id));
    MetadataRecord {
        id,
        caption: caption_of(&spec),
        dialogue: dialogue_of(&spec),
        spec,
    }
}

pub fn generate_dataset(n: usize, seed: u64, resolutions: &[usize], out_dir: &Path) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    if resolutions.is_empty() {
        return Err(Error::InvalidArgument("at least one resolution is required".into()));
    }
    if let Some(&r) = resolutions.iter().find(|r| !SUPPORTED_RESOLUTIONS.contains(r)) {
        return Err(Error::UnsupportedResolution(r));
    }
    fs::create_dir_all(out_dir).at(out_dir)?;
    let records: Vec<MetadataRecord> = (0..n as u64).map(|id| record_for(id, seed)).collect();
    let mut metadata = Vec::new();
    for rec in &records {
        serde_json::to_writer(&mut metadata, rec)?;
        metadata.push(b'\n');
    }
    let mut digest = DigestBuilder::new(&metadata);
    for &res in resolutions {
        let dir = out_dir.join(IMAGES_DIR).join(res.to_string());
        fs::create_dir_all(&dir).at(&dir)?;
        for rec in &records {
            let img = render_scene(&rec.spec, res)?;
            digest.image(&img.to_rgb8());
            img.save_png(&image_path(out_dir, res, rec.id))?;
        }
    }
    let meta_path = out_dir.join(METADATA_FILE);
    fs::File::create(&meta_path)
        .and_then(|mut f| f.write_all(&metadata))
        .at(&meta_path)?;
    let manifest = DatasetManifest {
        n,
        seed,
        resolutions: resolutions.to_vec(),
        digest: digest.finish(),
    };
    let manifest_path = out_dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?).at(&manifest_path)?;
    Ok(manifest)
}
