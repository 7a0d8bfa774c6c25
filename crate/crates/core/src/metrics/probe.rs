//! Composition and motion probes scored against the ground-truth prompt.

use ndarray::{ArrayView3, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use super::decode::decode_scene;
use crate::prompt::{reduce_to_first_frame, Color, Motion, ObjectClause, PromptAst};
use crate::scene::{cell_center, color_rgb, motion_segment, turn_frame, MAX_HALF_SIZE, MIN_HALF_SIZE, SIZE};

/// Pixels within this RGB distance of an object color count as that color.
pub const COLOR_RADIUS: f64 = 0.35;
/// Least displacement along the commanded direction for a `moves` to count.
pub const MIN_DISPLACEMENT: f64 = 6.0;
/// Area ratio a `grows` must reach; `shrinks` must reach its reciprocal.
pub const GROWTH_RATIO: f64 = 1.25;
/// The largest area change a sprite can make, `(max half-size / min half-size)²`.
pub const MAX_AREA_RATIO: f64 = (MAX_HALF_SIZE / MIN_HALF_SIZE) * (MAX_HALF_SIZE / MIN_HALF_SIZE);
/// Components smaller than this are treated as noise.
const MIN_COMPONENT: usize = 3;

/// Per-prompt category scores; `None` where the category does not apply.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PromptScores {
    pub composition: f64,
    pub dynamic_attribute: Option<f64>,
    pub motion_binding: Option<f64>,
    pub motion_order: Option<f64>,
    pub numeracy: f64,
}

impl PromptScores {
    pub fn categories(&self) -> [Option<f64>; 5] {
        [Some(self.composition), self.dynamic_attribute, self.motion_binding, self.motion_order, Some(self.numeracy)]
    }

    /// Mean of the applicable categories.
    pub fn overall(&self) -> f64 {
        let v: Vec<f64> = self.categories().into_iter().flatten().collect();
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub const CATEGORIES: [&str; 5] = ["composition", "dynamic_attribute", "motion_binding", "motion_order", "numeracy"];

/// Fraction of prompted objects found in frame 0 with the right color,
/// shape and cell (one decoded object per prompted object).
pub fn composition_score(video: ArrayView4<f32>, ast: &PromptAst) -> f64 {
    composition_of_frame(video.index_axis(Axis(0), 0), ast)
}

pub fn composition_of_frame(frame: ArrayView3<f32>, ast: &PromptAst) -> f64 {
    let decoded = decode_scene(frame).objects;
    let want = reduce_to_first_frame(ast);
    let mut used = vec![false; decoded.len()];
    let mut hits = 0;
    for o in &want.objects {
        if let Some(i) = (0..decoded.len())
            .find(|&i| !used[i] && decoded[i].color == o.color && decoded[i].shape == o.shape && decoded[i].cell == o.position)
        {
            used[i] = true;
            hits += 1;
        }
    }
    hits as f64 / want.objects.len() as f64
}

/// What the tracker sees of one object in one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Blob {
    centroid: (f64, f64),
    area: usize,
    /// Pixel counts per color of interest, aligned with the tracked palette.
    counts: [usize; 3],
}

fn near(px: [f64; 3], rgb: [f64; 3]) -> bool {
    let d2: f64 = (0..3).map(|c| (px[c] - rgb[c]).powi(2)).sum();
    d2 <= COLOR_RADIUS * COLOR_RADIUS
}

/// Connected (8-neighbour) components of pixels close to any palette color.
fn components(frame: ArrayView3<f32>, palette: &[[f64; 3]]) -> Vec<Blob> {
    let mut label = vec![usize::MAX; SIZE * SIZE];
    let mut color_of = vec![usize::MAX; SIZE * SIZE];
    for y in 0..SIZE {
        for x in 0..SIZE {
            let px = [frame[[y, x, 0]] as f64, frame[[y, x, 1]] as f64, frame[[y, x, 2]] as f64];
            if let Some(k) = palette.iter().position(|&c| near(px, c)) {
                color_of[y * SIZE + x] = k;
            }
        }
    }
    let mut blobs = Vec::new();
    let mut stack = Vec::new();
    for start in 0..SIZE * SIZE {
        if color_of[start] == usize::MAX || label[start] != usize::MAX {
            continue;
        }
        let id = blobs.len();
        label[start] = id;
        stack.push(start);
        let (mut sx, mut sy, mut n, mut counts) = (0.0, 0.0, 0usize, [0usize; 3]);
        while let Some(p) = stack.pop() {
            let (y, x) = (p / SIZE, p % SIZE);
            sx += x as f64;
            sy += y as f64;
            n += 1;
            counts[color_of[p]] += 1;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= SIZE as i64 || nx >= SIZE as i64 {
                        continue;
                    }
                    let q = ny as usize * SIZE + nx as usize;
                    if color_of[q] != usize::MAX && label[q] == usize::MAX {
                        label[q] = id;
                        stack.push(q);
                    }
                }
            }
        }
        blobs.push(Blob { centroid: (sx / n as f64, sy / n as f64), area: n, counts });
    }
    blobs.retain(|b| b.area >= MIN_COMPONENT);
    blobs
}

/// Distinct colors an object shows over its script, in order of appearance.
fn palette(clause: &ObjectClause) -> Vec<Color> {
    let mut p = vec![clause.color];
    for m in &clause.motions {
        if let Motion::Turn(c) = m {
            if !p.contains(c) {
                p.push(*c);
            }
        }
    }
    p
}

/// Follows one object through the video: in frame 0 the component nearest
/// its cell center, afterwards the component nearest the previous centroid.
fn track(video: ArrayView4<f32>, clause: &ObjectClause) -> Vec<Option<Blob>> {
    let pal: Vec<[f64; 3]> = palette(clause).into_iter().map(color_rgb).collect();
    let mut prev = cell_center(clause.position);
    let mut out = Vec::with_capacity(video.dim().0);
    for f in 0..video.dim().0 {
        let blobs = components(video.index_axis(Axis(0), f), &pal);
        let pick = blobs.into_iter().min_by(|a, b| {
            let d = |q: &Blob| (q.centroid.0 - prev.0).powi(2) + (q.centroid.1 - prev.1).powi(2);
            d(a).total_cmp(&d(b))
        });
        if let Some(b) = pick {
            prev = b.centroid;
        }
        out.push(pick);
    }
    out
}

/// Does motion `i` of `clause` show up in its segment?
fn motion_holds(clause: &ObjectClause, i: usize, tr: &[Option<Blob>]) -> bool {
    let n = clause.motions.len();
    let seg = motion_segment(i, n);
    let from = seg.0.saturating_sub(1);
    let to = seg.1 - 1;
    match clause.motions[i] {
        Motion::Move(d) => match (tr[from], tr[to]) {
            (Some(a), Some(b)) => {
                let (dx, dy) = d.delta();
                (b.centroid.0 - a.centroid.0) * dx + (b.centroid.1 - a.centroid.1) * dy >= MIN_DISPLACEMENT
            }
            _ => false,
        },
        Motion::Grow | Motion::Shrink => match (tr[from], tr[to]) {
            (Some(a), Some(b)) => {
                // Beyond the world's size range the blob is not the same object.
                let r = b.area as f64 / a.area as f64;
                if clause.motions[i] == Motion::Grow {
                    (GROWTH_RATIO..=MAX_AREA_RATIO).contains(&r)
                } else {
                    (1.0 / MAX_AREA_RATIO..=1.0 / GROWTH_RATIO).contains(&r)
                }
            }
            _ => false,
        },
        Motion::Turn(target) => {
            let before = clause.motions[..i]
                .iter()
                .rev()
                .find_map(|m| if let Motion::Turn(c) = m { Some(*c) } else { None })
                .unwrap_or(clause.color);
            let pal = palette(clause);
            let idx = |c: Color| pal.iter().position(|&p| p == c).expect("turn colors are in the palette");
            let (pre, post) = (idx(before), idx(target));
            let switch = turn_frame(seg);
            (seg.0..seg.1).all(|f| match tr[f] {
                Some(b) => {
                    let (want, other) = if f < switch { (pre, post) } else { (post, pre) };
                    b.counts[want] > b.counts[other]
                }
                None => false,
            })
        }
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// All category scores for one generated video against its prompt.
pub fn motion_scores(video: ArrayView4<f32>, ast: &PromptAst) -> PromptScores {
    let frame0 = video.index_axis(Axis(0), 0);
    let decoded = decode_scene(frame0);
    let mut dynamic = Vec::new();
    let mut binding = Vec::new();
    let mut order = Vec::new();
    for clause in &ast.objects {
        if clause.motions.is_empty() {
            continue;
        }
        let tr = track(video, clause);
        let held: Vec<bool> = (0..clause.motions.len()).map(|i| motion_holds(clause, i, &tr)).collect();
        for (m, &ok) in clause.motions.iter().zip(&held) {
            let v = if ok { 1.0 } else { 0.0 };
            match m {
                Motion::Move(_) => binding.push(v),
                _ => dynamic.push(v),
            }
        }
        if clause.motions.len() > 1 {
            order.push(if held.iter().all(|&h| h) { 1.0 } else { 0.0 });
        }
    }
    PromptScores {
        composition: composition_of_frame(frame0, ast),
        dynamic_attribute: mean(&dynamic),
        motion_binding: mean(&binding),
        motion_order: mean(&order),
        numeracy: if decoded.objects.len() == ast.objects.len() { 1.0 } else { 0.0 },
    }
}

/// Category means over a set of scored videos; `None` where no video had
/// the category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub composition: f64,
    pub dynamic_attribute: Option<f64>,
    pub motion_binding: Option<f64>,
    pub motion_order: Option<f64>,
    pub numeracy: f64,
    pub overall: f64,
    pub samples: usize,
    pub seeds: Vec<u64>,
}

impl ScoreReport {
    /// Averages each category over the items where it applies; `overall` is
    /// the unweighted mean of the category means that have any items.
    pub fn aggregate(items: &[PromptScores], seeds: Vec<u64>) -> Self {
        let col = |k: usize| mean(&items.iter().filter_map(|s| s.categories()[k]).collect::<Vec<_>>());
        let cats: Vec<Option<f64>> = (0..5).map(col).collect();
        let present: Vec<f64> = cats.iter().flatten().copied().collect();
        ScoreReport {
            composition: cats[0].unwrap_or(0.0),
            dynamic_attribute: cats[1],
            motion_binding: cats[2],
            motion_order: cats[3],
            numeracy: cats[4].unwrap_or(0.0),
            overall: mean(&present).unwrap_or(0.0),
            samples: items.len(),
            seeds,
        }
    }

    pub fn categories(&self) -> [Option<f64>; 5] {
        [Some(self.composition), self.dynamic_attribute, self.motion_binding, self.motion_order, Some(self.numeracy)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::parse_prompt;
    use crate::scene::{simulate, Video};
    use ndarray::{concatenate, s};

    fn gt(p: &str) -> (PromptAst, Video) {
        let ast = parse_prompt(p).unwrap();
        let v = simulate(&ast, 5).unwrap();
        (ast, v)
    }

    #[test]
    fn ground_truth_scores_one() {
        for p in [
            "red square at top-left moves right",
            "blue circle at center turns green",
            "yellow triangle at bottom-right moves up then moves left; green square at top-center",
            "green circle at center grows then turns red",
            "red triangle at center shrinks; blue square at bottom-left moves right then turns yellow",
        ] {
            let (ast, v) = gt(p);
            let s = motion_scores(v.view(), &ast);
            assert_eq!(s.overall(), 1.0, "{p}: {s:?}");
        }
    }

    #[test]
    fn random_feasible_prompts_score_one() {
        for seed in 0..400 {
            let (ast, jitter) = crate::scene::dataset_draw(seed);
            let v = simulate(&ast, jitter).unwrap();
            let s = motion_scores(v.view(), &ast);
            assert_eq!(s.overall(), 1.0, "seed {seed} {}: {s:?}", crate::prompt::serialize_prompt(&ast));
        }
    }

    #[test]
    fn white_video_scores_zero_composition() {
        let (ast, _) = gt("red square at top-left; blue circle at center");
        let white = Video::from_elem((8, SIZE, SIZE, 3), 1.0);
        assert_eq!(composition_score(white.view(), &ast), 0.0);
        let s = motion_scores(white.view(), &ast);
        assert_eq!(s.numeracy, 0.0);
        assert_eq!(s.motion_binding, None);
    }

    #[test]
    fn frozen_video_fails_motion() {
        let (ast, v) = gt("blue square at middle-left moves right");
        let f0 = v.slice(s![0..1, .., .., ..]);
        let frozen = concatenate(Axis(0), &[f0; 8]).unwrap();
        let s = motion_scores(frozen.view(), &ast);
        assert_eq!(s.motion_binding, Some(0.0));
        assert_eq!(s.composition, 1.0);
    }

    #[test]
    fn swapped_halves_break_order() {
        let (ast, v) = gt("red circle at top-left moves right then moves down");
        let swapped = concatenate(Axis(0), &[v.slice(s![4.., .., .., ..]), v.slice(s![..4, .., .., ..])]).unwrap();
        assert_eq!(motion_scores(swapped.view(), &ast).motion_order, Some(0.0));
    }

    #[test]
    fn aggregate_skips_absent_categories() {
        let a = PromptScores { composition: 1.0, numeracy: 1.0, motion_binding: Some(0.0), ..Default::default() };
        let b = PromptScores { composition: 0.5, numeracy: 0.0, ..Default::default() };
        let r = ScoreReport::aggregate(&[a, b], vec![0]);
        assert_eq!(r.composition, 0.75);
        assert_eq!(r.motion_binding, Some(0.0));
        assert_eq!(r.dynamic_attribute, None);
        assert_eq!(r.overall, (0.75 + 0.0 + 0.5) / 3.0);
        assert_eq!(a.overall(), 2.0 / 3.0);
    }

    #[test]
    fn vanishing_is_not_shrinking() {
        let (ast, v) = gt("red square at center shrinks");
        assert_eq!(motion_scores(v.view(), &ast).dynamic_attribute, Some(1.0));
        // Keep frame 0; afterwards only a three-pixel red speck remains.
        let mut speck = v.clone();
        let bg = v[[0, 0, 0, 0]];
        speck.slice_mut(s![1.., .., .., ..]).fill(bg);
        let red = v.slice(s![0, 16, 16, ..]).to_owned();
        for f in 1..8 {
            for (y, x) in [(16, 16), (16, 17), (17, 16)] {
                speck.slice_mut(s![f, y, x, ..]).assign(&red);
            }
        }
        assert_eq!(motion_scores(speck.view(), &ast).dynamic_attribute, Some(0.0));
    }
}
