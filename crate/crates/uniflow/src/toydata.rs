//! Synthetic scene corpus: 32x32 RGB images of 1 to 3 colored shapes on a
//! 4x4 grid of 8x8 cells, with bijective token captions.
//!
//! Everything is deterministic given (seed, split). The same 8x8 binary
//! masks drive both rendering and the checker's shape templates, so a
//! ground-truth render always scores 1.0. Masks are designed to overlap
//! heavily in the cell center (the color check reads the central 4x4) while
//! staying pairwise decorrelated (max Pearson between different shapes is
//! about 0.38, against the 0.6 acceptance threshold).

use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IMG_SIZE: usize = 32;
pub const CELL: usize = 8;
pub const GRID: usize = 4;
pub const IMG_LEN: usize = IMG_SIZE * IMG_SIZE * 3;

pub mod vocab {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    pub const BOI: usize = 3;
    pub const EOI: usize = 4;
    pub const RED: usize = 5;
    pub const GREEN: usize = 6;
    pub const BLUE: usize = 7;
    pub const SQUARE: usize = 8;
    pub const CIRCLE: usize = 9;
    pub const TRIANGLE: usize = 10;
    pub const ROW0: usize = 11; // rows 11..=14
    pub const COL0: usize = 15; // cols 15..=18
    pub const RECOLOR: usize = 19;
    pub const MOVE: usize = 20;
    pub const REMOVE: usize = 21;
    pub const ADD: usize = 22;
    // 23..=31 reserved
    pub const SIZE: usize = 32;

    pub fn name(tok: usize) -> &'static str {
        match tok {
            PAD => "pad",
            BOS => "bos",
            EOS => "eos",
            BOI => "boi",
            EOI => "eoi",
            RED => "red",
            GREEN => "green",
            BLUE => "blue",
            SQUARE => "square",
            CIRCLE => "circle",
            TRIANGLE => "triangle",
            11 => "r0",
            12 => "r1",
            13 => "r2",
            14 => "r3",
            15 => "c0",
            16 => "c1",
            17 => "c2",
            18 => "c3",
            RECOLOR => "recolor",
            MOVE => "move",
            REMOVE => "remove",
            ADD => "add",
            _ => "reserved",
        }
    }

    pub fn from_name(s: &str) -> Option<usize> {
        (0..SIZE).find(|&t| name(t) == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn token(self) -> usize {
        match self {
            Shape::Square => vocab::SQUARE,
            Shape::Circle => vocab::CIRCLE,
            Shape::Triangle => vocab::TRIANGLE,
        }
    }

    fn from_token(tok: usize) -> Option<Shape> {
        Shape::ALL.into_iter().find(|s| s.token() == tok)
    }

    /// Cell-local 8x8 occupancy mask, row-major.
    pub fn mask(self) -> [bool; CELL * CELL] {
        let mut m = [false; CELL * CELL];
        for r in 0..CELL {
            for c in 0..CELL {
                m[r * CELL + c] = match self {
                    Shape::Square => (1..=6).contains(&r) && (1..=6).contains(&c),
                    Shape::Circle => {
                        let center = (2..=5).contains(&r) && (2..=5).contains(&c);
                        let tips = (r <= 1 && (3..=4).contains(&c))
                            || (r >= 6 && (3..=4).contains(&c))
                            || (c <= 1 && (3..=4).contains(&r))
                            || (c >= 6 && (3..=4).contains(&r));
                        center || tips
                    }
                    Shape::Triangle => match r {
                        1 | 2 => (3..=4).contains(&c),
                        3 | 4 => (2..=5).contains(&c),
                        5 | 6 => (1..=6).contains(&c),
                        7 => true,
                        _ => false,
                    },
                };
            }
        }
        m
    }
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

    pub fn token(self) -> usize {
        match self {
            Color::Red => vocab::RED,
            Color::Green => vocab::GREEN,
            Color::Blue => vocab::BLUE,
        }
    }

    fn from_token(tok: usize) -> Option<Color> {
        Color::ALL.into_iter().find(|c| c.token() == tok)
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Obj {
    pub shape: Shape,
    pub color: Color,
    pub row: usize,
    pub col: usize,
}

/// A renderable scene. Corpus scenes carry 1 to 3 objects on distinct cells;
/// edit targets may be empty (removing the last object is legal).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<Obj>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CaptionError {
    #[error("caption too short or missing bos/eos framing")]
    BadFraming,
    #[error("token {0} is not valid at its position")]
    BadToken(usize),
    #[error("objects are not in canonical (row, col) order or share a cell")]
    NotCanonical,
    #[error("scene must have at most 3 objects")]
    TooManyObjects,
}

impl Scene {
    pub fn new(mut objects: Vec<Obj>) -> Scene {
        objects.sort_by_key(|o| (o.row, o.col));
        Scene { objects }
    }

    pub fn is_canonical(&self) -> bool {
        self.objects.windows(2).all(|w| (w[0].row, w[0].col) < (w[1].row, w[1].col))
    }
}

/// BOS (color shape row col)* EOS, objects in canonical order.
pub fn caption_tokens(scene: &Scene) -> Vec<usize> {
    debug_assert!(scene.is_canonical());
    let mut t = vec![vocab::BOS];
    for o in &scene.objects {
        t.push(o.color.token());
        t.push(o.shape.token());
        t.push(vocab::ROW0 + o.row);
        t.push(vocab::COL0 + o.col);
    }
    t.push(vocab::EOS);
    t
}

pub fn parse_caption(tokens: &[usize]) -> Result<Scene, CaptionError> {
    if tokens.len() < 2 || tokens[0] != vocab::BOS || *tokens.last().unwrap() != vocab::EOS {
        return Err(CaptionError::BadFraming);
    }
    let body = &tokens[1..tokens.len() - 1];
    if body.len() % 4 != 0 {
        return Err(CaptionError::BadFraming);
    }
    if body.len() / 4 > 3 {
        return Err(CaptionError::TooManyObjects);
    }
    let mut objects = Vec::new();
    for chunk in body.chunks(4) {
        let color = Color::from_token(chunk[0]).ok_or(CaptionError::BadToken(chunk[0]))?;
        let shape = Shape::from_token(chunk[1]).ok_or(CaptionError::BadToken(chunk[1]))?;
        if !(vocab::ROW0..vocab::ROW0 + GRID).contains(&chunk[2]) {
            return Err(CaptionError::BadToken(chunk[2]));
        }
        if !(vocab::COL0..vocab::COL0 + GRID).contains(&chunk[3]) {
            return Err(CaptionError::BadToken(chunk[3]));
        }
        objects.push(Obj { shape, color, row: chunk[2] - vocab::ROW0, col: chunk[3] - vocab::COL0 });
    }
    let scene = Scene { objects };
    if !scene.is_canonical() {
        return Err(CaptionError::NotCanonical);
    }
    Ok(scene)
}

/// Channel-last row-major render in [0,1], flat [32*32*3].
pub fn render<S: Scalar>(scene: &Scene) -> Tensor<S> {
    let mut img = vec![S::zero(); IMG_LEN];
    for o in &scene.objects {
        let mask = o.shape.mask();
        let rgb = o.color.rgb();
        for r in 0..CELL {
            for c in 0..CELL {
                if mask[r * CELL + c] {
                    let pr = o.row * CELL + r;
                    let pc = o.col * CELL + c;
                    let base = (pr * IMG_SIZE + pc) * 3;
                    for ch in 0..3 {
                        img[base + ch] = S::from_f64_c(rgb[ch]);
                    }
                }
            }
        }
    }
    Tensor::from_vec_unchecked(&[IMG_LEN], img)
}

/// Every (shape, color, cell) single-object combination, fixed order.
pub fn all_combos() -> Vec<Obj> {
    let mut v = Vec::with_capacity(144);
    for cell in 0..GRID * GRID {
        for &shape in &Shape::ALL {
            for &color in &Color::ALL {
                v.push(Obj { shape, color, row: cell / GRID, col: cell % GRID });
            }
        }
    }
    v
}

pub const VAL_COMBOS: usize = 18;

/// Deterministic partition of the 144 single-object combos. Train scenes
/// draw only from the train pool; val scenes include at least one val-pool
/// combo, so train and val captions never collide. The "all" split uses the
/// full pool (and is the one whose singles enumerate every combination).
pub fn combo_pools(seed: u64) -> (Vec<Obj>, Vec<Obj>) {
    let combos = all_combos();
    let mut idx: Vec<usize> = (0..combos.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x706f_6f6c);
    for i in (1..idx.len()).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let val: Vec<Obj> = idx[..VAL_COMBOS].iter().map(|&i| combos[i]).collect();
    let train: Vec<Obj> = idx[VAL_COMBOS..].iter().map(|&i| combos[i]).collect();
    (train, val)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    All,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "all" => Some(Split::All),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::All => "all",
        }
    }
}

fn split_salt(split: Split) -> u64 {
    match split {
        Split::Train => 0x7472,
        Split::Val => 0x76616c,
        Split::All => 0x616c6c,
    }
}

/// Deterministic corpus for one split. Every third sample is a single-object
/// scene cycling through the split's combo pool, so any count >= 3x pool
/// size covers the pool; the rest are 2-3 object scenes.
pub fn generate_corpus(seed: u64, count: usize, split: Split) -> Vec<(Scene, Vec<usize>)> {
    assert!(count >= 1, "corpus needs at least one sample");
    let (train_pool, val_pool) = combo_pools(seed);
    let pool: &[Obj] = match split {
        Split::Train => &train_pool,
        Split::Val => &val_pool,
        Split::All => {
            return corpus_from_pool(seed, count, split, &all_combos(), None);
        }
    };
    let extras: Option<&[Obj]> = match split {
        // multi-object val scenes may mix in train combos; the val-pool
        // anchor object already makes the caption unseen
        Split::Val => Some(&train_pool),
        _ => None,
    };
    corpus_from_pool(seed, count, split, pool, extras)
}

fn corpus_from_pool(
    seed: u64,
    count: usize,
    split: Split,
    pool: &[Obj],
    extras: Option<&[Obj]>,
) -> Vec<(Scene, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(split_salt(split)));
    let mut out = Vec::with_capacity(count);
    let mut cycle = 0usize;
    for i in 0..count {
        let scene = if i % 3 == 0 {
            let anchor = pool[cycle % pool.len()];
            cycle += 1;
            Scene::new(vec![anchor])
        } else {
            let n = rng.gen_range(2..=3);
            let anchor = pool[rng.gen_range(0..pool.len())];
            let mut objects = vec![anchor];
            let fill_pool = extras.unwrap_or(pool);
            let mut guard = 0;
            while objects.len() < n && guard < 100 {
                let cand = fill_pool[rng.gen_range(0..fill_pool.len())];
                if objects.iter().all(|o| (o.row, o.col) != (cand.row, cand.col)) {
                    objects.push(cand);
                }
                guard += 1;
            }
            Scene::new(objects)
        };
        let tokens = caption_tokens(&scene);
        out.push((scene, tokens));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditKind {
    Recolor,
    Move,
    Remove,
    Add,
}

#[derive(Clone, Debug)]
pub struct EditPair {
    pub source: Scene,
    pub instruction: Vec<usize>,
    pub target: Scene,
}

/// Deterministic edit pairs over train-pool scenes. Instruction layouts:
/// recolor row col color / move row col row' col' / remove row col /
/// add color shape row col.
pub fn make_edit_pairs(seed: u64, count: usize) -> Vec<EditPair> {
    assert!(count >= 1);
    let (pool, _) = combo_pools(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x5851_F42D).wrapping_add(0xE417));
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let n = rng.gen_range(1..=3);
        let mut objects: Vec<Obj> = Vec::new();
        let mut guard = 0;
        while objects.len() < n && guard < 100 {
            let cand = pool[rng.gen_range(0..pool.len())];
            if objects.iter().all(|o| (o.row, o.col) != (cand.row, cand.col)) {
                objects.push(cand);
            }
            guard += 1;
        }
        let source = Scene::new(objects);
        let kind = match rng.gen_range(0..4) {
            0 => EditKind::Recolor,
            1 => EditKind::Move,
            2 => EditKind::Remove,
            _ => EditKind::Add,
        };
        if let Some(pair) = build_edit(&source, kind, &mut rng) {
            out.push(pair);
        }
    }
    out
}

pub fn build_edit(source: &Scene, kind: EditKind, rng: &mut ChaCha8Rng) -> Option<EditPair> {
    let occupied: Vec<(usize, usize)> = source.objects.iter().map(|o| (o.row, o.col)).collect();
    let free: Vec<(usize, usize)> = (0..GRID * GRID)
        .map(|c| (c / GRID, c % GRID))
        .filter(|rc| !occupied.contains(rc))
        .collect();
    match kind {
        EditKind::Recolor => {
            if source.objects.is_empty() {
                return None;
            }
            let k = rng.gen_range(0..source.objects.len());
            let obj = source.objects[k];
            let new_color = *Color::ALL.iter().filter(|&&c| c != obj.color).nth(rng.gen_range(0..2))?;
            let mut objs = source.objects.clone();
            objs[k].color = new_color;
            Some(EditPair {
                source: source.clone(),
                instruction: vec![vocab::RECOLOR, vocab::ROW0 + obj.row, vocab::COL0 + obj.col, new_color.token()],
                target: Scene::new(objs),
            })
        }
        EditKind::Move => {
            if source.objects.is_empty() || free.is_empty() {
                return None;
            }
            let k = rng.gen_range(0..source.objects.len());
            let obj = source.objects[k];
            let (nr, nc) = free[rng.gen_range(0..free.len())];
            let mut objs = source.objects.clone();
            objs[k].row = nr;
            objs[k].col = nc;
            Some(EditPair {
                source: source.clone(),
                instruction: vec![
                    vocab::MOVE,
                    vocab::ROW0 + obj.row,
                    vocab::COL0 + obj.col,
                    vocab::ROW0 + nr,
                    vocab::COL0 + nc,
                ],
                target: Scene::new(objs),
            })
        }
        EditKind::Remove => {
            if source.objects.is_empty() {
                return None;
            }
            let k = rng.gen_range(0..source.objects.len());
            let obj = source.objects[k];
            let mut objs = source.objects.clone();
            objs.remove(k);
            Some(EditPair {
                source: source.clone(),
                instruction: vec![vocab::REMOVE, vocab::ROW0 + obj.row, vocab::COL0 + obj.col],
                target: Scene::new(objs),
            })
        }
        EditKind::Add => {
            if source.objects.len() >= 3 || free.is_empty() {
                return None;
            }
            let (nr, nc) = free[rng.gen_range(0..free.len())];
            let color = Color::ALL[rng.gen_range(0..3)];
            let shape = Shape::ALL[rng.gen_range(0..3)];
            let mut objs = source.objects.clone();
            objs.push(Obj { shape, color, row: nr, col: nc });
            Some(EditPair {
                source: source.clone(),
                instruction: vec![vocab::ADD, color.token(), shape.token(), vocab::ROW0 + nr, vocab::COL0 + nc],
                target: Scene::new(objs),
            })
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CorpusRecord {
    objects: Vec<Obj>,
    tokens: Vec<usize>,
}

/// One JSON record per line: scene spec and caption tokens. Images are
/// regenerated on load.
pub fn write_corpus_jsonl(path: &Path, items: &[(Scene, Vec<usize>)]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (scene, tokens) in items {
        let rec = CorpusRecord { objects: scene.objects.clone(), tokens: tokens.clone() };
        serde_json::to_writer(&mut f, &rec)?;
        f.write_all(b"\n")?;
    }
    f.flush()
}

pub fn read_corpus_jsonl(path: &Path) -> std::io::Result<Vec<(Scene, Vec<usize>)>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&line)?;
        out.push((Scene { objects: rec.objects }, rec.tokens));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn caption_round_trips_canonically() {
        let scene = Scene::new(vec![
            Obj { shape: Shape::Circle, color: Color::Blue, row: 2, col: 1 },
            Obj { shape: Shape::Square, color: Color::Red, row: 0, col: 3 },
        ]);
        let tokens = caption_tokens(&scene);
        let parsed = parse_caption(&tokens).unwrap();
        assert_eq!(parsed, scene);
        // canonical order puts (0,3) first
        assert_eq!(parsed.objects[0].row, 0);
    }

    #[test]
    fn malformed_captions_error() {
        assert_eq!(parse_caption(&[vocab::EOS]), Err(CaptionError::BadFraming));
        assert_eq!(parse_caption(&[vocab::BOS, vocab::RED, vocab::EOS]), Err(CaptionError::BadFraming));
        // color token where a shape belongs
        let bad = vec![vocab::BOS, vocab::RED, vocab::RED, vocab::ROW0, vocab::COL0, vocab::EOS];
        assert!(matches!(parse_caption(&bad), Err(CaptionError::BadToken(_))));
        // non-canonical order
        let a = Obj { shape: Shape::Square, color: Color::Red, row: 1, col: 0 };
        let b = Obj { shape: Shape::Square, color: Color::Red, row: 0, col: 0 };
        let mut toks = vec![vocab::BOS];
        for o in [a, b] {
            toks.extend([o.color.token(), o.shape.token(), vocab::ROW0 + o.row, vocab::COL0 + o.col]);
        }
        toks.push(vocab::EOS);
        assert_eq!(parse_caption(&toks), Err(CaptionError::NotCanonical));
    }

    #[test]
    fn corpus_is_deterministic_per_seed_and_split() {
        let a = generate_corpus(7, 20, Split::Train);
        let b = generate_corpus(7, 20, Split::Train);
        assert_eq!(a.len(), b.len());
        for ((sa, ta), (sb, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(sa, sb);
            assert_eq!(ta, tb);
        }
        let c = generate_corpus(8, 20, Split::Train);
        assert!(a.iter().zip(c.iter()).any(|((sa, _), (sc, _))| sa != sc));
    }

    #[test]
    fn thousand_samples_cover_every_single_object_combo() {
        let corpus = generate_corpus(7, 1000, Split::All);
        let mut seen = std::collections::HashSet::new();
        for (scene, _) in &corpus {
            if scene.objects.len() == 1 {
                seen.insert(scene.objects[0]);
            }
        }
        assert_eq!(seen.len(), 144, "all 3*3*16 combos must appear");
    }

    #[test]
    fn train_and_val_captions_are_disjoint() {
        let train = generate_corpus(7, 300, Split::Train);
        let val = generate_corpus(7, 90, Split::Val);
        let train_caps: std::collections::HashSet<Vec<usize>> =
            train.iter().map(|(_, t)| t.clone()).collect();
        for (_, t) in &val {
            assert!(!train_caps.contains(t), "val caption leaked into train: {:?}", t);
        }
        // and every train single-object combo comes from the train pool
        let (pool, val_pool) = combo_pools(7);
        let pool: std::collections::HashSet<Obj> = pool.into_iter().collect();
        for (scene, _) in &train {
            for o in &scene.objects {
                assert!(pool.contains(o));
            }
        }
        // val anchors reach the val pool
        let val_pool: std::collections::HashSet<Obj> = val_pool.into_iter().collect();
        let anchored = val.iter().filter(|(s, _)| s.objects.iter().any(|o| val_pool.contains(o))).count();
        assert_eq!(anchored, val.len());
    }

    #[test]
    fn render_uses_cells_exclusively() {
        let scene = Scene::new(vec![Obj { shape: Shape::Square, color: Color::Green, row: 1, col: 2 }]);
        let img: Tensor<f64> = render(&scene);
        // a pixel inside the cell is green
        let base = ((1 * CELL + 3) * IMG_SIZE + (2 * CELL + 3)) * 3;
        assert_eq!(img.data()[base], 0.0);
        assert_eq!(img.data()[base + 1], 1.0);
        // a pixel in another cell is black
        assert_eq!(img.data()[0], 0.0);
    }

    #[test]
    fn shape_masks_fill_centers_but_stay_decorrelated() {
        for &s in &Shape::ALL {
            let m = s.mask();
            let central: usize = (2..=5)
                .flat_map(|r| (2..=5).map(move |c| (r, c)))
                .filter(|&(r, c)| m[r * CELL + c])
                .count();
            assert!(central > 8, "{:?} central fill {central}/16", s);
        }
        for &a in &Shape::ALL {
            for &b in &Shape::ALL {
                if a == b {
                    continue;
                }
                let (ma, mb) = (a.mask(), b.mask());
                let phi = binary_pearson(&ma, &mb);
                assert!(phi < 0.5, "{:?} vs {:?} phi {phi}", a, b);
            }
        }
    }

    fn binary_pearson(a: &[bool], b: &[bool]) -> f64 {
        let n = a.len() as f64;
        let (na, nb) = (a.iter().filter(|x| **x).count() as f64, b.iter().filter(|x| **x).count() as f64);
        let o = a.iter().zip(b).filter(|(x, y)| **x && **y).count() as f64;
        (n * o - na * nb) / ((na * (n - na) * nb * (n - nb)).sqrt())
    }

    #[test]
    fn edit_pairs_apply_their_instruction() {
        let pairs = make_edit_pairs(11, 60);
        assert_eq!(pairs.len(), 60);
        for p in &pairs {
            match p.instruction[0] {
                vocab::RECOLOR => {
                    assert_eq!(p.source.objects.len(), p.target.objects.len());
                    let diffs = p
                        .source
                        .objects
                        .iter()
                        .zip(&p.target.objects)
                        .filter(|(a, b)| a != b)
                        .count();
                    assert_eq!(diffs, 1);
                }
                vocab::REMOVE => {
                    assert_eq!(p.source.objects.len(), p.target.objects.len() + 1);
                }
                vocab::ADD => {
                    assert_eq!(p.source.objects.len() + 1, p.target.objects.len());
                }
                vocab::MOVE => {
                    assert_eq!(p.source.objects.len(), p.target.objects.len());
                }
                other => panic!("unknown instruction head {other}"),
            }
            assert!(p.target.is_canonical());
        }
    }

    #[test]
    fn remove_on_single_object_scene_empties_it() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let source = Scene::new(vec![Obj { shape: Shape::Circle, color: Color::Red, row: 0, col: 0 }]);
        let pair = build_edit(&source, EditKind::Remove, &mut rng).unwrap();
        assert!(pair.target.objects.is_empty());
        let img: Tensor<f64> = render(&pair.target);
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = std::env::temp_dir().join("uniflow_corpus_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("train.jsonl");
        let items = generate_corpus(3, 12, Split::Train);
        write_corpus_jsonl(&path, &items).unwrap();
        let back = read_corpus_jsonl(&path).unwrap();
        assert_eq!(items.len(), back.len());
        for ((s, t), (s2, t2)) in items.iter().zip(back.iter()) {
            assert_eq!(s, s2);
            assert_eq!(t, t2);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    proptest! {
        #[test]
        fn caption_parse_round_trip_holds_for_random_scenes(seed in 0u64..5000) {
            use rand::Rng as _;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..=3);
            let mut objects: Vec<Obj> = Vec::new();
            while objects.len() < n {
                let cand = Obj {
                    shape: Shape::ALL[rng.gen_range(0..3)],
                    color: Color::ALL[rng.gen_range(0..3)],
                    row: rng.gen_range(0..GRID),
                    col: rng.gen_range(0..GRID),
                };
                if objects.iter().all(|o| (o.row, o.col) != (cand.row, cand.col)) {
                    objects.push(cand);
                }
            }
            let scene = Scene::new(objects);
            let parsed = parse_caption(&caption_tokens(&scene)).unwrap();
            prop_assert_eq!(parsed, scene);
        }
    }
}
