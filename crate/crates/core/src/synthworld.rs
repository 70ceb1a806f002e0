//! Deterministic toy world: grid scenes of colored shapes, crop/highlight
//! tools, expert trajectories that replay exactly, and JSONL benchmarks.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::sequence::{Item, Special, TokenSequence};

pub const SHAPES: [&str; 5] = ["circle", "square", "triangle", "star", "cross"];
pub const COLORS: [&str; 5] = ["red", "green", "blue", "yellow", "purple"];
pub const LETTERS: [&str; 4] = ["A", "B", "C", "D"];
pub const N_CELL_CODES: usize = 1 + SHAPES.len() * COLORS.len() * 2;
pub const MIN_GRID: usize = 3;
pub const MAX_GRID: usize = 12;

/// A cell's decoded content.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Object {
    pub shape: usize,
    pub color: usize,
    pub highlighted: bool,
}

impl Object {
    pub fn code(self) -> u32 {
        (1 + self.shape * COLORS.len() * 2 + self.color * 2 + self.highlighted as usize) as u32
    }

    pub fn decode(code: u32) -> Option<Object> {
        if code == 0 || code as usize >= N_CELL_CODES {
            return None;
        }
        let c = code as usize - 1;
        Some(Object { shape: c / (COLORS.len() * 2), color: (c / 2) % COLORS.len(), highlighted: c % 2 == 1 })
    }
}

/// Row-major grid of cell codes; 0 is empty.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scene {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<u32>,
}

impl Scene {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Scene { rows, cols, cells: vec![0; rows * cols] }
    }

    pub fn get(&self, r: usize, c: usize) -> u32 {
        self.cells[r * self.cols + c]
    }

    pub fn n_patches(&self) -> usize {
        self.rows * self.cols
    }

    pub fn objects(&self) -> impl Iterator<Item = ((usize, usize), Object)> + '_ {
        self.cells
            .iter()
            .enumerate()
            .filter_map(|(i, &code)| Object::decode(code).map(|o| ((i / self.cols, i % self.cols), o)))
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.hash(&mut h);
        h.finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToolKind {
    Crop,
    Highlight,
}

/// `bbox` is `[r0, c0, r1, c1]`, inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCall {
    pub kind: ToolKind,
    pub bbox: [usize; 4],
}

impl ToolCall {
    pub fn describe(&self) -> String {
        let [r0, c0, r1, c1] = self.bbox;
        let verb = match self.kind {
            ToolKind::Crop => "Crop to",
            ToolKind::Highlight => "Highlight",
        };
        format!("{verb} rows {r0}-{r1}, cols {c0}-{c1}.")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub text: String,
    pub options: Vec<String>,
    pub gold: String,
}

impl Question {
    /// The full prompt text: the lettered options followed by the question.
    pub fn prompt(&self) -> String {
        let opts: Vec<String> = LETTERS.iter().zip(&self.options).map(|(l, o)| format!("{l} {o}")).collect();
        format!("{}. {}", opts.join(" "), self.text)
    }

    pub fn query_color(&self) -> Option<usize> {
        let last = self.text.split_whitespace().last()?;
        COLORS.iter().position(|c| *c == last)
    }

    pub fn gold_index(&self) -> Option<usize> {
        LETTERS.iter().position(|l| *l == self.gold)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub tool: ToolCall,
    pub scene: Scene,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    SingleSingle,
    MultiTypeSingle,
    SingleMulti,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::SingleSingle, Regime::MultiTypeSingle, Regime::SingleMulti];

    pub fn name(self) -> &'static str {
        match self {
            Regime::SingleSingle => "single_single",
            Regime::MultiTypeSingle => "multi_type_single",
            Regime::SingleMulti => "single_multi",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL.into_iter().find(|r| r.name() == s).ok_or_else(|| Error::Config(format!("unknown regime {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryExample {
    pub id: String,
    pub regime: Regime,
    pub scene0: Scene,
    pub question: Question,
    pub steps: Vec<Step>,
}

impl TrajectoryExample {
    /// Source scene each step's tool is applied to.
    pub fn step_source(&self, i: usize) -> &Scene {
        match self.steps[i].tool.kind {
            ToolKind::Crop if i > 0 => &self.steps[i - 1].scene,
            _ => &self.scene0,
        }
    }
}

/// Grid size and clutter of generated scenes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Difficulty {
    pub rows: usize,
    pub cols: usize,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Difficulty {
    pub const EASY: Difficulty = Difficulty { rows: 8, cols: 8, min_objects: 3, max_objects: 6 };
    /// Larger and more cluttered than anything in the training split.
    pub const HARD: Difficulty = Difficulty { rows: 10, cols: 10, min_objects: 7, max_objects: 10 };
}

/// Places `n_objects` at distinct cells; exactly one has `query_color`.
pub fn gen_scene(rng: &mut impl Rng, rows: usize, cols: usize, n_objects: usize, query_color: usize) -> Result<Scene> {
    if !(MIN_GRID..=MAX_GRID).contains(&rows) || !(MIN_GRID..=MAX_GRID).contains(&cols) {
        return Err(Error::Generation(format!("grid {rows}x{cols} outside {MIN_GRID}..={MAX_GRID}")));
    }
    if n_objects == 0 || n_objects > rows * cols {
        return Err(Error::Generation(format!("cannot place {n_objects} objects on a {rows}x{cols} grid")));
    }
    if query_color >= COLORS.len() {
        return Err(Error::Generation(format!("unknown color index {query_color}")));
    }
    let mut scene = Scene::empty(rows, cols);
    let cells = index::sample(rng, rows * cols, n_objects);
    for (k, cell) in cells.iter().enumerate() {
        let color = if k == 0 {
            query_color
        } else {
            let c = rng.random_range(0..COLORS.len() - 1);
            if c >= query_color {
                c + 1
            } else {
                c
            }
        };
        let shape = rng.random_range(0..SHAPES.len());
        scene.cells[cell] = Object { shape, color, highlighted: false }.code();
    }
    Ok(scene)
}

pub fn apply_tool(scene: &Scene, call: &ToolCall) -> Result<Scene> {
    let [r0, c0, r1, c1] = call.bbox;
    if r0 > r1 || c0 > c1 || r1 >= scene.rows || c1 >= scene.cols {
        return Err(Error::Bounds { bbox: call.bbox, rows: scene.rows, cols: scene.cols });
    }
    Ok(match call.kind {
        ToolKind::Crop => {
            let mut cells = Vec::with_capacity((r1 - r0 + 1) * (c1 - c0 + 1));
            for r in r0..=r1 {
                cells.extend_from_slice(&scene.cells[r * scene.cols + c0..=r * scene.cols + c1]);
            }
            Scene { rows: r1 - r0 + 1, cols: c1 - c0 + 1, cells }
        }
        ToolKind::Highlight => {
            let mut out = scene.clone();
            for r in r0..=r1 {
                for c in c0..=c1 {
                    let code = &mut out.cells[r * scene.cols + c];
                    if let Some(obj) = Object::decode(*code) {
                        *code = Object { highlighted: true, ..obj }.code();
                    }
                }
            }
            out
        }
    })
}

fn target_cell(scene: &Scene, color: usize) -> Option<(usize, usize)> {
    let mut hits = scene.objects().filter(|(_, o)| o.color == color);
    let first = hits.next()?;
    if hits.next().is_some() {
        return None;
    }
    Some(first.0)
}

/// A box around `(tr, tc)` containing no other object, at most 3×3.
fn isolating_bbox(rng: &mut impl Rng, scene: &Scene, (tr, tc): (usize, usize)) -> [usize; 4] {
    for _ in 0..8 {
        let r0 = tr.saturating_sub(rng.random_range(0..=1));
        let c0 = tc.saturating_sub(rng.random_range(0..=1));
        let r1 = (tr + rng.random_range(0..=1)).min(scene.rows - 1);
        let c1 = (tc + rng.random_range(0..=1)).min(scene.cols - 1);
        let others = (r0..=r1)
            .flat_map(|r| (c0..=c1).map(move |c| (r, c)))
            .filter(|&(r, c)| (r, c) != (tr, tc) && scene.get(r, c) != 0)
            .count();
        if others == 0 {
            return [r0, c0, r1, c1];
        }
    }
    [tr, tc, tr, tc]
}

/// The half-by-half block of `scene` that contains `(tr, tc)`.
fn quadrant_bbox(scene: &Scene, (tr, tc): (usize, usize)) -> [usize; 4] {
    let (hr, hc) = (scene.rows / 2, scene.cols / 2);
    let (r0, r1) = if tr < hr { (0, hr - 1) } else { (hr, scene.rows - 1) };
    let (c0, c1) = if tc < hc { (0, hc - 1) } else { (hc, scene.cols - 1) };
    [r0, c0, r1, c1]
}

pub fn answer_text(letter: &str, color: usize, shape: usize) -> String {
    format!("The answer is {letter}. The {} object is a {}.", COLORS[color], SHAPES[shape])
}

pub fn gen_trajectory(rng: &mut impl Rng, regime: Regime, difficulty: Difficulty) -> Result<TrajectoryExample> {
    let query_color = rng.random_range(0..COLORS.len());
    let n_objects = rng.random_range(difficulty.min_objects..=difficulty.max_objects);
    let scene0 = gen_scene(rng, difficulty.rows, difficulty.cols, n_objects, query_color)?;
    let target = target_cell(&scene0, query_color).expect("generator places exactly one query object");
    let gold_shape = Object::decode(scene0.get(target.0, target.1)).expect("target cell is occupied").shape;

    // Options keep the fixed shape order and one non-gold shape is left out
    // at random. With the gold shape uniform, each letter is gold with
    // probability exactly 1/4.
    let left_out = {
        let k = rng.random_range(0..SHAPES.len() - 1);
        if k >= gold_shape {
            k + 1
        } else {
            k
        }
    };
    let shown: Vec<usize> = (0..SHAPES.len()).filter(|&s| s != left_out).collect();
    let gold_pos = shown.iter().position(|&s| s == gold_shape).expect("gold shape is never left out");
    let question = Question {
        text: format!("Which shape is {}", COLORS[query_color]),
        options: shown.iter().map(|&s| SHAPES[s].to_string()).collect(),
        gold: LETTERS[gold_pos].to_string(),
    };

    let mut calls = Vec::new();
    match regime {
        Regime::SingleSingle => {
            calls.push(ToolCall { kind: ToolKind::Crop, bbox: isolating_bbox(rng, &scene0, target) })
        }
        Regime::MultiTypeSingle => {
            let kind = if rng.random_bool(0.5) { ToolKind::Crop } else { ToolKind::Highlight };
            calls.push(ToolCall { kind, bbox: isolating_bbox(rng, &scene0, target) });
        }
        Regime::SingleMulti => {
            let n = rng.random_range(1..=3);
            let (mut frame, mut pos) = (scene0.clone(), target);
            for _ in 0..n - 1 {
                let bbox = quadrant_bbox(&frame, pos);
                calls.push(ToolCall { kind: ToolKind::Crop, bbox });
                frame = apply_tool(&frame, &calls[calls.len() - 1])?;
                pos = (pos.0 - bbox[0], pos.1 - bbox[1]);
            }
            calls.push(ToolCall { kind: ToolKind::Crop, bbox: isolating_bbox(rng, &frame, pos) });
        }
    }

    let mut steps: Vec<Step> = Vec::with_capacity(calls.len());
    let last = calls.len() - 1;
    for (i, call) in calls.into_iter().enumerate() {
        let source = match call.kind {
            ToolKind::Crop if i > 0 => &steps[i - 1].scene,
            _ => &scene0,
        };
        let scene = apply_tool(source, &call)?;
        let mut text = call.describe();
        if i == last {
            text.push(' ');
            text.push_str(&answer_text(&question.gold, query_color, gold_shape));
        }
        steps.push(Step { tool: call, scene, text });
    }
    Ok(TrajectoryExample { id: String::new(), regime, scene0, question, steps })
}

/// Checks every generator invariant; returns a description of the first
/// violation.
pub fn verify_example(ex: &TrajectoryExample) -> std::result::Result<(), String> {
    let color = ex.question.query_color().ok_or("question names no color")?;
    let target = target_cell(&ex.scene0, color).ok_or("query color is not unique in scene0")?;
    let gold_shape = Object::decode(ex.scene0.get(target.0, target.1)).ok_or("empty target")?.shape;
    let gi = ex.question.gold_index().ok_or("gold is not a letter")?;
    if ex.question.options.len() != 4 || ex.question.options[gi] != SHAPES[gold_shape] {
        return Err(format!("gold option {:?} is not {}", ex.question.options.get(gi), SHAPES[gold_shape]));
    }
    let distinct: HashSet<&String> = ex.question.options.iter().collect();
    if distinct.len() != 4 {
        return Err("options are not distinct".into());
    }
    if ex.steps.is_empty() {
        return Err("empty trajectory".into());
    }
    for (i, step) in ex.steps.iter().enumerate() {
        let replay = apply_tool(ex.step_source(i), &step.tool).map_err(|e| e.to_string())?;
        if replay != step.scene {
            return Err(format!("step {i} scene does not replay"));
        }
    }
    let n = ex.steps.len();
    let ok_count = match ex.regime {
        Regime::SingleSingle | Regime::MultiTypeSingle => n == 1,
        Regime::SingleMulti => (1..=3).contains(&n),
    };
    if !ok_count {
        return Err(format!("{} steps for regime {}", n, ex.regime.name()));
    }
    if ex.regime != Regime::MultiTypeSingle && ex.steps.iter().any(|s| s.tool.kind != ToolKind::Crop) {
        return Err("non-crop tool in a crop-only regime".into());
    }
    let final_text = &ex.steps[n - 1].text;
    if !final_text.contains(&format!("The answer is {}.", ex.question.gold)) {
        return Err("final text does not state the gold letter".into());
    }
    Ok(())
}

/// Composes nested crop boxes: `inner` is relative to the crop `outer`.
pub fn compose_bbox(outer: [usize; 4], inner: [usize; 4]) -> [usize; 4] {
    [outer[0] + inner[0], outer[1] + inner[1], outer[0] + inner[2], outer[1] + inner[3]]
}

/// Fixed word vocabulary of every template string. Output class
/// `len()` is end-of-sequence.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

const PUNCT: [char; 3] = ['.', ',', '-'];

impl Vocab {
    pub fn standard() -> Self {
        let mut words: Vec<String> = Vec::new();
        words.extend(LETTERS.iter().map(|s| s.to_string()));
        words.extend(SHAPES.iter().map(|s| s.to_string()));
        words.extend(COLORS.iter().map(|s| s.to_string()));
        for w in [
            ".",
            ",",
            "-",
            "Which",
            "shape",
            "is",
            "Crop",
            "to",
            "rows",
            "cols",
            "Highlight",
            "The",
            "answer",
            "object",
            "a",
        ] {
            words.push(w.to_string());
        }
        words.extend((0..MAX_GRID).map(|i| i.to_string()));
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocab { words, index }
    }

    /// Number of words; the output vocabulary is `len() + 1`.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn eos_class(&self) -> usize {
        self.words.len()
    }

    pub fn n_classes(&self) -> usize {
        self.words.len() + 1
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn letter_ids(&self) -> [usize; 4] {
        LETTERS.map(|l| self.index[l])
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for chunk in text.split_whitespace() {
            let mut word = String::new();
            for ch in chunk.chars() {
                if PUNCT.contains(&ch) {
                    if !word.is_empty() {
                        out.push(self.lookup(&word)?);
                        word.clear();
                    }
                    out.push(self.lookup(&ch.to_string())?);
                } else {
                    word.push(ch);
                }
            }
            if !word.is_empty() {
                out.push(self.lookup(&word)?);
            }
        }
        Ok(out)
    }

    fn lookup(&self, w: &str) -> Result<usize> {
        self.id(w).ok_or_else(|| Error::Data(format!("word {w:?} is not in the vocabulary")))
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut s = String::new();
        let mut prev_dash = false;
        for (k, &id) in ids.iter().enumerate() {
            let w = self.word(id).unwrap_or("<eos>");
            let glue = w.len() == 1 && w.chars().all(|c| PUNCT.contains(&c));
            if k > 0 && !glue && !prev_dash {
                s.push(' ');
            }
            s.push_str(w);
            prev_dash = w == "-";
        }
        s
    }
}

/// Serialization layouts of an example.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SerializeMode {
    InputView,
    TrajectoryView,
    FullContext,
    /// Latent slots teacher-forced with the first tool output's patches.
    LvrTrain,
    /// Input view plus the opening latent delimiter.
    LvrInfer,
}

fn push_scene(seq: &mut TokenSequence, scene: &Scene, segment: u16) {
    seq.push(Item::Special(Special::Boi), segment);
    for r in 0..scene.rows {
        for c in 0..scene.cols {
            seq.push(Item::Patch { code: scene.get(r, c), row: r, col: c }, segment);
        }
    }
    seq.push(Item::Special(Special::Eoi), segment);
}

/// Appends text tokens and marks every position whose successor is one of
/// them as a language-modelling target.
fn push_supervised_text(seq: &mut TokenSequence, ids: &[usize], segment: u16) {
    for &id in ids {
        seq.supervise_last(id);
        seq.push(Item::Text(id), segment);
    }
}

fn push_eos_target(seq: &mut TokenSequence, vocab: &Vocab, segment: u16) {
    seq.supervise_last(vocab.eos_class());
    seq.push(Item::Special(Special::Eos), segment);
}

pub fn serialize_example(ex: &TrajectoryExample, mode: SerializeMode, vocab: &Vocab) -> Result<TokenSequence> {
    let needs_steps = !matches!(mode, SerializeMode::InputView | SerializeMode::LvrInfer);
    if needs_steps && ex.steps.is_empty() {
        return Err(Error::Contract(format!("{mode:?} needs a non-empty trajectory ({})", ex.id)));
    }
    let mut seq = TokenSequence::default();
    if mode != SerializeMode::TrajectoryView {
        push_scene(&mut seq, &ex.scene0, 0);
        for id in vocab.tokenize(&ex.question.prompt())? {
            seq.push(Item::Text(id), 0);
        }
    }
    match mode {
        SerializeMode::InputView => {}
        SerializeMode::TrajectoryView | SerializeMode::FullContext => {
            for (i, step) in ex.steps.iter().enumerate() {
                let seg = (i + 1) as u16;
                push_scene(&mut seq, &step.scene, seg);
                push_supervised_text(&mut seq, &vocab.tokenize(&step.text)?, seg);
            }
            push_eos_target(&mut seq, vocab, ex.steps.len() as u16);
        }
        SerializeMode::LvrTrain => {
            seq.push(Item::Special(Special::LatOpen), 1);
            for slot in 0..ex.steps[0].scene.n_patches() {
                seq.push(Item::Latent(slot), 1);
            }
            seq.push(Item::Special(Special::LatClose), 1);
            push_supervised_text(&mut seq, &[vocab.lookup(&ex.question.gold)?], 2);
            push_eos_target(&mut seq, vocab, 2);
        }
        SerializeMode::LvrInfer => seq.push(Item::Special(Special::LatOpen), 1),
    }
    Ok(seq)
}

/// Reconstructs the step texts of a serialized trajectory.
pub fn detokenize_steps(seq: &TokenSequence, vocab: &Vocab) -> Vec<String> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut last_seg = None;
    for (item, &seg) in seq.items.iter().zip(&seq.segment_id) {
        if seg == 0 {
            continue;
        }
        if let Item::Text(id) = item {
            if last_seg != Some(seg) {
                out.push(Vec::new());
                last_seg = Some(seg);
            }
            out.last_mut().expect("pushed above").push(*id);
        }
    }
    out.iter().map(|ids| vocab.detokenize(ids)).collect()
}

/// Grid codes of every image segment, in order.
pub fn detokenize_scenes(seq: &TokenSequence) -> Vec<Vec<u32>> {
    let mut out: Vec<Vec<u32>> = Vec::new();
    for item in &seq.items {
        match item {
            Item::Special(Special::Boi) => out.push(Vec::new()),
            Item::Patch { code, .. } => out.last_mut().expect("patch inside an image").push(*code),
            _ => {}
        }
    }
    out
}

/// splitmix64 finalizer; derives independent per-example seeds.
pub fn mix_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Split {
    Train = 1,
    EvalEasy = 2,
    EvalHard = 3,
}

pub fn gen_example(
    seed: u64,
    regime: Regime,
    difficulty: Difficulty,
    stream: u64,
    index: u64,
) -> Result<TrajectoryExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, stream, index));
    gen_trajectory(&mut rng, regime, difficulty)
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetSummary {
    pub regime: Regime,
    pub seed: u64,
    pub n_train: usize,
    pub n_eval_easy: usize,
    pub n_eval_hard: usize,
    /// Train draws rejected because their scene matched an eval scene.
    pub train_resamples: usize,
}

pub const TRAIN_FILE: &str = "train.jsonl";
pub const EVAL_EASY_FILE: &str = "eval_easy.jsonl";
pub const EVAL_HARD_FILE: &str = "eval_hard.jsonl";

/// Writes `train.jsonl`, `eval_easy.jsonl` and `eval_hard.jsonl` under `dir`.
pub fn gen_dataset(
    seed: u64,
    regime: Regime,
    n_train: usize,
    n_eval_easy: usize,
    n_eval_hard: usize,
    dir: &Path,
) -> Result<DatasetSummary> {
    if n_train == 0 || n_eval_easy == 0 || n_eval_hard == 0 {
        return Err(Error::Config("dataset split sizes must be at least 1".into()));
    }
    std::fs::create_dir_all(dir)?;
    let build = |split: Split, n: usize, diff: Difficulty| -> Result<Vec<TrajectoryExample>> {
        (0..n)
            .map(|i| {
                let mut ex = gen_example(seed, regime, diff, split as u64, i as u64)?;
                ex.id = format!("{}-{}-{i:06}", split_name(split), regime.name());
                Ok(ex)
            })
            .collect()
    };
    let easy = build(Split::EvalEasy, n_eval_easy, Difficulty::EASY)?;
    let hard = build(Split::EvalHard, n_eval_hard, Difficulty::HARD)?;
    let held_out: HashSet<u64> = easy.iter().chain(&hard).map(|e| e.scene0.fingerprint()).collect();

    let mut train = Vec::with_capacity(n_train);
    let mut resamples = 0;
    for i in 0..n_train {
        let mut attempt = 0u64;
        let mut ex = loop {
            let ex = gen_example(seed, regime, Difficulty::EASY, Split::Train as u64 + 16 * attempt, i as u64)?;
            if !held_out.contains(&ex.scene0.fingerprint()) {
                break ex;
            }
            resamples += 1;
            attempt += 1;
        };
        ex.id = format!("train-{}-{i:06}", regime.name());
        train.push(ex);
    }

    write_jsonl(&dir.join(TRAIN_FILE), &train)?;
    write_jsonl(&dir.join(EVAL_EASY_FILE), &easy)?;
    write_jsonl(&dir.join(EVAL_HARD_FILE), &hard)?;
    Ok(DatasetSummary { regime, seed, n_train, n_eval_easy, n_eval_hard, train_resamples: resamples })
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::EvalEasy => "easy",
        Split::EvalHard => "hard",
    }
}

pub fn write_jsonl(path: &Path, examples: &[TrajectoryExample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Parsed examples plus the number of lines that failed to parse.
#[derive(Debug, Clone, Default)]
pub struct LoadedSplit {
    pub examples: Vec<TrajectoryExample>,
    pub malformed: usize,
}

pub fn read_jsonl(path: &Path) -> Result<LoadedSplit> {
    let file = File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = LoadedSplit::default();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TrajectoryExample>(&line) {
            Ok(ex) => out.examples.push(ex),
            Err(_) => out.malformed += 1,
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn cell_codes_round_trip() {
        for code in 1..N_CELL_CODES as u32 {
            assert_eq!(Object::decode(code).unwrap().code(), code);
        }
        assert_eq!(Object::decode(0), None);
        assert_eq!(Object::decode(N_CELL_CODES as u32), None);
    }

    #[test]
    fn single_object_scene() {
        let s = gen_scene(&mut rng(0), 3, 3, 1, 2).unwrap();
        assert_eq!(s.cells.iter().filter(|&&c| c != 0).count(), 1);
        assert!(gen_scene(&mut rng(0), 3, 3, 10, 0).is_err());
        assert!(gen_scene(&mut rng(0), 3, 3, 0, 0).is_err());
    }

    #[test]
    fn scenes_are_seed_deterministic() {
        let a = gen_scene(&mut rng(5), 8, 8, 6, 1).unwrap();
        let b = gen_scene(&mut rng(5), 8, 8, 6, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn query_color_is_unique_over_10k_scenes() {
        let mut r = rng(11);
        for i in 0..10_000 {
            let color = i % COLORS.len();
            let n = 1 + i % 20;
            let s = gen_scene(&mut r, 8, 8, n, color).unwrap();
            assert_eq!(s.objects().filter(|(_, o)| o.color == color).count(), 1);
            assert_eq!(s.objects().count(), n);
        }
    }

    #[test]
    fn crop_full_extent_is_identity() {
        let s = gen_scene(&mut rng(1), 5, 7, 8, 0).unwrap();
        let c = apply_tool(&s, &ToolCall { kind: ToolKind::Crop, bbox: [0, 0, 4, 6] }).unwrap();
        assert_eq!(c, s);
        let err = apply_tool(&s, &ToolCall { kind: ToolKind::Crop, bbox: [0, 0, 5, 6] }).unwrap_err();
        assert!(matches!(err, Error::Bounds { .. }));
    }

    #[test]
    fn highlight_sets_the_bit_inside_the_box_only() {
        let s = gen_scene(&mut rng(2), 8, 8, 30, 3).unwrap();
        let h = apply_tool(&s, &ToolCall { kind: ToolKind::Highlight, bbox: [1, 2, 4, 6] }).unwrap();
        assert_eq!((h.rows, h.cols), (s.rows, s.cols));
        for r in 0..8 {
            for c in 0..8 {
                let inside = (1..=4).contains(&r) && (2..=6).contains(&c);
                match Object::decode(h.get(r, c)) {
                    Some(o) => {
                        assert_eq!(o.highlighted, inside);
                        // the highlight bit is the low bit of (code - 1)
                        assert_eq!((h.get(r, c) - 1) % 2 == 1, inside);
                    }
                    None => assert_eq!(s.get(r, c), 0),
                }
            }
        }
    }

    #[test]
    fn nested_crops_compose() {
        let mut r = rng(3);
        for _ in 0..500 {
            let s = gen_scene(&mut r, 12, 12, 40, 4).unwrap();
            let r0 = r.random_range(0..12);
            let r1 = r.random_range(r0..12);
            let c0 = r.random_range(0..12);
            let c1 = r.random_range(c0..12);
            let b1 = [r0, c0, r1, c1];
            let (h, w) = (r1 - r0 + 1, c1 - c0 + 1);
            let ir0 = r.random_range(0..h);
            let ir1 = r.random_range(ir0..h);
            let ic0 = r.random_range(0..w);
            let ic1 = r.random_range(ic0..w);
            let b2 = [ir0, ic0, ir1, ic1];
            let crop = |s: &Scene, b| apply_tool(s, &ToolCall { kind: ToolKind::Crop, bbox: b }).unwrap();
            assert_eq!(crop(&crop(&s, b1), b2), crop(&s, compose_bbox(b1, b2)));
        }
    }

    #[test]
    fn regime_step_counts() {
        let mut r = rng(4);
        let ex = gen_trajectory(&mut r, Regime::SingleSingle, Difficulty::EASY).unwrap();
        assert_eq!(ex.steps.len(), 1);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            let ex = gen_trajectory(&mut r, Regime::SingleMulti, Difficulty::EASY).unwrap();
            counts[ex.steps.len()] += 1;
            verify_example(&ex).unwrap();
            // every crop lies inside the frame it is applied to
            for (i, st) in ex.steps.iter().enumerate() {
                let src = ex.step_source(i);
                assert!(st.tool.bbox[2] < src.rows && st.tool.bbox[3] < src.cols);
                if i > 0 {
                    assert!(st.scene.n_patches() <= ex.steps[i - 1].scene.n_patches());
                }
            }
        }
        assert_eq!(counts[0], 0);
        assert!(counts[1] > 0 && counts[2] > 0 && counts[3] > 0);
    }

    #[test]
    fn gold_option_names_the_query_shape() {
        let mut r = rng(6);
        for regime in Regime::ALL {
            for _ in 0..10_000 {
                let ex = gen_trajectory(&mut r, regime, Difficulty::EASY).unwrap();
                verify_example(&ex).unwrap();
            }
        }
    }

    #[test]
    fn gold_letters_are_roughly_uniform() {
        let mut r = rng(7);
        let mut hist = [0usize; 4];
        for _ in 0..8000 {
            let ex = gen_trajectory(&mut r, Regime::SingleSingle, Difficulty::EASY).unwrap();
            hist[ex.question.gold_index().unwrap()] += 1;
        }
        for h in hist {
            assert!((1800..2200).contains(&h), "{hist:?}");
        }
    }

    #[test]
    fn options_keep_shape_order_and_omit_one_distractor() {
        let mut r = rng(11);
        for _ in 0..2000 {
            let ex = gen_trajectory(&mut r, Regime::SingleMulti, Difficulty::HARD).unwrap();
            let idx: Vec<usize> =
                ex.question.options.iter().map(|o| SHAPES.iter().position(|s| s == o).unwrap()).collect();
            assert!(idx.windows(2).all(|w| w[0] < w[1]), "{idx:?}");
        }
    }

    #[test]
    fn tokenizer_round_trips_templates() {
        let v = Vocab::standard();
        for s in [
            "Crop to rows 2-4, cols 3-5.",
            "Highlight rows 0-11, cols 10-10. The answer is B. The red object is a star.",
            "A circle B star C cross D square. Which shape is purple",
        ] {
            assert_eq!(v.detokenize(&v.tokenize(s).unwrap()), s);
        }
        assert!(v.tokenize("Crop to banana").is_err());
    }

    #[test]
    fn masks_cover_only_step_text() {
        let v = Vocab::standard();
        let mut r = rng(8);
        for regime in Regime::ALL {
            let ex = gen_trajectory(&mut r, regime, Difficulty::EASY).unwrap();
            let seq = serialize_example(&ex, SerializeMode::FullContext, &v).unwrap();
            seq.check_invariants().unwrap();
            for (p, item) in seq.items.iter().enumerate() {
                if seq.segment_id[p] == 0 || matches!(item, Item::Patch { .. }) {
                    assert_eq!(seq.vlm_mask[p], 0, "position {p} {item:?}");
                }
            }
            let n_text: usize = ex.steps.iter().map(|s| v.tokenize(&s.text).unwrap().len()).sum();
            assert_eq!(seq.vlm_mask.iter().map(|&m| m as usize).sum::<usize>(), n_text + 1);
        }
    }

    #[test]
    fn input_view_length() {
        let v = Vocab::standard();
        let ex = gen_trajectory(&mut rng(9), Regime::SingleSingle, Difficulty::EASY).unwrap();
        let seq = serialize_example(&ex, SerializeMode::InputView, &v).unwrap();
        let q = v.tokenize(&ex.question.prompt()).unwrap().len();
        assert_eq!(seq.len(), 2 + 64 + q);
        assert!(seq.vlm_mask.iter().all(|&m| m == 0));
    }

    #[test]
    fn serialization_round_trips_over_1k_examples() {
        let v = Vocab::standard();
        let mut r = rng(10);
        for i in 0..1000 {
            let ex = gen_trajectory(&mut r, Regime::ALL[i % 3], Difficulty::EASY).unwrap();
            let seq = serialize_example(&ex, SerializeMode::FullContext, &v).unwrap();
            let texts: Vec<String> = ex.steps.iter().map(|s| s.text.clone()).collect();
            assert_eq!(detokenize_steps(&seq, &v), texts);
            let scenes = detokenize_scenes(&seq);
            assert_eq!(scenes[0], ex.scene0.cells);
            for (k, st) in ex.steps.iter().enumerate() {
                assert_eq!(scenes[k + 1], st.scene.cells);
            }
        }
    }

    #[test]
    fn lvr_train_has_one_slot_per_tool_output_patch() {
        let v = Vocab::standard();
        let mut r = rng(12);
        for regime in Regime::ALL {
            let ex = gen_trajectory(&mut r, regime, Difficulty::EASY).unwrap();
            let seq = serialize_example(&ex, SerializeMode::LvrTrain, &v).unwrap();
            let slots = seq.items.iter().filter(|i| matches!(i, Item::Latent(_))).count();
            assert_eq!(slots, ex.steps[0].scene.n_patches());
            seq.check_invariants().unwrap();
        }
    }

    #[test]
    fn empty_trajectory_is_a_contract_error() {
        let v = Vocab::standard();
        let mut ex = gen_trajectory(&mut rng(13), Regime::SingleSingle, Difficulty::EASY).unwrap();
        ex.steps.clear();
        assert!(serialize_example(&ex, SerializeMode::InputView, &v).is_ok());
        assert!(matches!(serialize_example(&ex, SerializeMode::FullContext, &v), Err(Error::Contract(_))));
    }

    #[test]
    fn dataset_files_are_deterministic_and_disjoint() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        gen_dataset(7, Regime::SingleSingle, 100, 20, 10, a.path()).unwrap();
        gen_dataset(7, Regime::SingleSingle, 100, 20, 10, b.path()).unwrap();
        for f in [TRAIN_FILE, EVAL_EASY_FILE, EVAL_HARD_FILE] {
            let x = std::fs::read(a.path().join(f)).unwrap();
            assert_eq!(x, std::fs::read(b.path().join(f)).unwrap());
        }
        let train = read_jsonl(&a.path().join(TRAIN_FILE)).unwrap();
        assert_eq!(train.examples.len(), 100);
        assert_eq!(train.malformed, 0);
        let easy = read_jsonl(&a.path().join(EVAL_EASY_FILE)).unwrap();
        let seen: HashSet<u64> = easy.examples.iter().map(|e| e.scene0.fingerprint()).collect();
        assert!(train.examples.iter().all(|e| !seen.contains(&e.scene0.fingerprint())));
        let hard = read_jsonl(&a.path().join(EVAL_HARD_FILE)).unwrap();
        assert!(hard.examples.iter().all(|e| e.scene0.rows > 8));
    }

    #[test]
    fn dataset_json_uses_contract_field_names() {
        let mut ex = gen_trajectory(&mut rng(14), Regime::MultiTypeSingle, Difficulty::EASY).unwrap();
        ex.id = "x".into();
        let v: serde_json::Value = serde_json::to_value(&ex).unwrap();
        for k in ["id", "regime", "scene0", "question", "steps"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert_eq!(v["regime"], "multi_type_single");
        assert!(v["scene0"]["cells"].is_array());
        assert_eq!(v["question"]["options"].as_array().unwrap().len(), 4);
        let step = &v["steps"][0];
        assert!(step["tool"]["bbox"].as_array().unwrap().len() == 4);
        assert!(step["tool"]["kind"] == "crop" || step["tool"]["kind"] == "highlight");
        assert!(step["scene"]["rows"].is_number() && step["text"].is_string());
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let err = gen_dataset(1, Regime::SingleSingle, 1, 1, 1, Path::new("/proc/nonexistent/x")).unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }
}
