//! The closed prompt language of the shape world.
//!
//! ```text
//! prompt := obj (";" obj)*
//! obj    := ["a" | "the"] color shape "at" position [motion ("then" motion)*]
//! motion := "moves" dir | "turns" color | "grows" | "shrinks"
//! ```
//!
//! Reducing a prompt to its first frame drops every motion; the colors and
//! positions that remain are exactly the scene's initial state.

mod parser;
mod token;

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;

pub use parser::parse_prompt;
pub use token::{tokenize, vocabulary, TokenSequence, MAX_TOKENS, PAD, SEP, VOCAB_SIZE};

pub const MAX_OBJECTS: usize = 3;
pub const MAX_MOTIONS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }
}

/// One of the 3×3 grid cells; `row` 0 is the top, `col` 0 the left.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub row: u8,
    pub col: u8,
}

impl Cell {
    pub fn new(row: u8, col: u8) -> Self {
        assert!(row < 3 && col < 3, "cell out of grid");
        Self { row, col }
    }

    pub fn all() -> impl Iterator<Item = Cell> {
        (0..3).flat_map(|r| (0..3).map(move |c| Cell::new(r, c)))
    }

    pub fn name(self) -> &'static str {
        const NAMES: [[&str; 3]; 3] = [
            ["top-left", "top-center", "top-right"],
            ["middle-left", "center", "middle-right"],
            ["bottom-left", "bottom-center", "bottom-right"],
        ];
        NAMES[self.row as usize][self.col as usize]
    }

    pub fn from_name(s: &str) -> Option<Cell> {
        Cell::all().find(|c| c.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Up, Direction::Down];

    pub fn name(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }

    /// Unit step in image coordinates (x right, y down).
    pub fn delta(self) -> (f64, f64) {
        match self {
            Direction::Left => (-1.0, 0.0),
            Direction::Right => (1.0, 0.0),
            Direction::Up => (0.0, -1.0),
            Direction::Down => (0.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Motion {
    Move(Direction),
    Turn(Color),
    Grow,
    Shrink,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObjectClause {
    pub color: Color,
    pub shape: Shape,
    pub position: Cell,
    pub motions: Vec<Motion>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PromptAst {
    pub objects: Vec<ObjectClause>,
}

impl fmt::Display for Motion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Motion::Move(d) => write!(f, "moves {}", d.name()),
            Motion::Turn(c) => write!(f, "turns {}", c.name()),
            Motion::Grow => f.write_str("grows"),
            Motion::Shrink => f.write_str("shrinks"),
        }
    }
}

impl fmt::Display for ObjectClause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} at {}", self.color.name(), self.shape.name(), self.position.name())?;
        for (i, m) in self.motions.iter().enumerate() {
            f.write_str(if i == 0 { " " } else { " then " })?;
            write!(f, "{m}")?;
        }
        Ok(())
    }
}

impl fmt::Display for PromptAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize_prompt(self))
    }
}

impl ObjectClause {
    /// Color after every motion has run.
    pub fn final_color(&self) -> Color {
        self.motions.iter().fold(self.color, |c, m| match m {
            Motion::Turn(t) => *t,
            _ => c,
        })
    }
}

impl PromptAst {
    /// Checks the semantic rules the grammar alone cannot express.
    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() || self.objects.len() > MAX_OBJECTS {
            return Err(Error::Semantic(format!(
                "prompt must describe 1..={MAX_OBJECTS} objects, got {}",
                self.objects.len()
            )));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if self.objects[..i].iter().any(|p| p.position == o.position) {
                return Err(Error::Semantic(format!("duplicate position {}", o.position.name())));
            }
            if o.motions.len() > MAX_MOTIONS {
                return Err(Error::Semantic(format!(
                    "object at {} has {} motions, limit {MAX_MOTIONS}",
                    o.position.name(),
                    o.motions.len()
                )));
            }
            let mut current = o.color;
            for m in &o.motions {
                if let Motion::Turn(target) = *m {
                    if target == o.color || target == current {
                        return Err(Error::Semantic(format!(
                            "{} {} cannot turn {}: it already has that color",
                            current.name(),
                            o.shape.name(),
                            target.name()
                        )));
                    }
                    current = target;
                }
            }
        }
        Ok(())
    }

    pub fn has_motion(&self) -> bool {
        self.objects.iter().any(|o| !o.motions.is_empty())
    }

    /// Sorted copy of the clauses, for order-insensitive comparison.
    pub fn clause_multiset(&self) -> Vec<ObjectClause> {
        let mut v = self.objects.clone();
        v.sort();
        v
    }
}

/// Canonical lowercase text without articles.
pub fn serialize_prompt(ast: &PromptAst) -> String {
    ast.objects.iter().map(|o| o.to_string()).collect::<Vec<_>>().join("; ")
}

/// The first-frame description: same objects, same order, no motions.
pub fn reduce_to_first_frame(ast: &PromptAst) -> PromptAst {
    PromptAst {
        objects: ast
            .objects
            .iter()
            .map(|o| ObjectClause { motions: Vec::new(), ..o.clone() })
            .collect(),
    }
}

/// A semantics-preserving surface variant: permuted clauses, random articles.
pub fn rephrase(ast: &PromptAst, seed: u64) -> String {
    let mut r = rng::stream(seed, &[0x4e9a]);
    let mut order: Vec<usize> = (0..ast.objects.len()).collect();
    order.shuffle(&mut r);
    order
        .iter()
        .map(|&i| {
            let article = ["", "a ", "the "][r.gen_range(0..3)];
            format!("{article}{}", ast.objects[i])
        })
        .collect::<Vec<_>>()
        .join("; ")
}

/// Reads a prompt file: one prompt per line, `#` comments and blank lines skipped.
pub fn read_prompt_file(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect())
}

/// Uniform draw from the grammar: 1–3 objects at distinct cells, 0–2 motions
/// each. The result is semantically valid but may still be geometrically
/// infeasible; callers that need renderable prompts reject those.
pub fn random_ast(r: &mut rng::Rng) -> PromptAst {
    let n = r.gen_range(1..=MAX_OBJECTS);
    let mut cells: Vec<Cell> = Cell::all().collect();
    cells.shuffle(r);
    let objects = cells[..n]
        .iter()
        .map(|&position| {
            let color = Color::ALL[r.gen_range(0..4)];
            let n_motions = r.gen_range(0..=MAX_MOTIONS);
            let mut current = color;
            let mut motions = Vec::with_capacity(n_motions);
            for _ in 0..n_motions {
                let m = match r.gen_range(0..4) {
                    0 => Motion::Move(Direction::ALL[r.gen_range(0..4)]),
                    1 => {
                        let choices: Vec<Color> =
                            Color::ALL.iter().copied().filter(|&c| c != color && c != current).collect();
                        let c = choices[r.gen_range(0..choices.len())];
                        current = c;
                        Motion::Turn(c)
                    }
                    2 => Motion::Grow,
                    _ => Motion::Shrink,
                };
                motions.push(m);
            }
            ObjectClause { color, shape: Shape::ALL[r.gen_range(0..3)], position, motions }
        })
        .collect();
    PromptAst { objects }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn ast(text: &str) -> PromptAst {
        parse_prompt(text).unwrap()
    }

    #[test]
    fn serialize_canonical_form() {
        let a = PromptAst {
            objects: vec![ObjectClause {
                color: Color::Red,
                shape: Shape::Square,
                position: Cell::new(0, 0),
                motions: vec![],
            }],
        };
        assert_eq!(serialize_prompt(&a), "red square at top-left");
        let t = ast("The BLUE circle at center turns green");
        let s = serialize_prompt(&t);
        assert_eq!(s, "blue circle at center turns green");
        assert_eq!(s.matches("turns green").count(), 1);
    }

    #[test]
    fn reduce_examples() {
        let r = reduce_to_first_frame(&ast("red square at top-left moves right"));
        assert_eq!(serialize_prompt(&r), "red square at top-left");
        let r = reduce_to_first_frame(&ast("blue circle at center turns green"));
        assert_eq!(serialize_prompt(&r), "blue circle at center");
        assert_eq!(r.objects[0].color, Color::Blue);
        assert_eq!(reduce_to_first_frame(&r), r);
    }

    #[test]
    fn duplicate_positions_and_same_color_turns_are_rejected() {
        assert!(matches!(
            parse_prompt("red square at center; blue circle at center"),
            Err(Error::Semantic(_))
        ));
        assert!(matches!(parse_prompt("red square at center turns red"), Err(Error::Semantic(_))));
        assert!(matches!(
            parse_prompt("red square at center turns green then turns green"),
            Err(Error::Semantic(_))
        ));
        assert!(matches!(
            parse_prompt("red square at center grows then grows then grows"),
            Err(Error::Semantic(_))
        ));
        assert!(matches!(
            parse_prompt("red square at top-left; red square at top-center; red square at top-right; red square at center"),
            Err(Error::Semantic(_))
        ));
    }

    #[test]
    fn single_object_rephrasings_vary_only_in_article() {
        let a = ast("red square at top-left grows");
        let forms: HashSet<String> = (0..100).map(|s| rephrase(&a, s)).collect();
        assert!(forms.len() <= 3);
        for f in &forms {
            assert_eq!(parse_prompt(f).unwrap(), a);
        }
    }

    #[test]
    fn two_object_rephrasings_permute_clauses() {
        let a = ast("blue circle at center turns green; a yellow triangle at bottom-right");
        let orders: HashSet<Vec<ObjectClause>> =
            (0..20).map(|s| parse_prompt(&rephrase(&a, s)).unwrap().objects).collect();
        assert_eq!(orders.len(), 2);
        for o in orders {
            let mut o = o;
            o.sort();
            assert_eq!(o, a.clause_multiset());
        }
    }

    #[test]
    fn three_object_rephrasings_are_diverse() {
        let a = ast("red square at top-left; green circle at center moves up; blue triangle at bottom-right");
        let forms: HashSet<String> = (0..25).map(|s| rephrase(&a, s)).collect();
        assert!(forms.len() >= 4, "only {} distinct", forms.len());
    }

    #[test]
    fn prompt_file_skips_comments() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("prompts.txt");
        std::fs::write(&p, "# header\nred square at center\n\n  # indented comment\nblue circle at top-left\n").unwrap();
        assert_eq!(read_prompt_file(&p).unwrap(), vec!["red square at center", "blue circle at top-left"]);
    }

    #[test]
    fn random_asts_are_valid() {
        let mut r = rng::stream(11, &[]);
        for _ in 0..500 {
            random_ast(&mut r).validate().unwrap();
        }
    }
}
