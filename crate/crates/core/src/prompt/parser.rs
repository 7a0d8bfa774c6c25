use super::{Cell, Color, Direction, Motion, ObjectClause, PromptAst, Shape};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct Tok {
    text: String,
    offset: usize,
}

fn lex(src: &str) -> Vec<Tok> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, ch) in src.char_indices() {
        if ch.is_whitespace() || ch == ';' {
            if let Some(s) = start.take() {
                out.push(Tok { text: src[s..i].to_lowercase(), offset: s });
            }
            if ch == ';' {
                out.push(Tok { text: ";".into(), offset: i });
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push(Tok { text: src[s..].to_lowercase(), offset: s });
    }
    out
}

struct Parser<'a> {
    toks: Vec<Tok>,
    pos: usize,
    src: &'a str,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&str> {
        self.toks.get(self.pos).map(|t| t.text.as_str())
    }

    fn error(&self, expected: &[&str]) -> Error {
        let (offset, found) = match self.toks.get(self.pos) {
            Some(t) => (t.offset, t.text.clone()),
            None => (self.src.len(), "<end of input>".to_owned()),
        };
        Error::Syntax { offset, found, expected: expected.iter().map(|s| s.to_string()).collect() }
    }

    fn expect(&mut self, word: &str) -> Result<()> {
        if self.peek() == Some(word) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(&[word]))
        }
    }

    fn choose<V: Copy>(&mut self, table: &[(&str, V)]) -> Result<V> {
        if let Some(w) = self.peek() {
            if let Some((_, v)) = table.iter().find(|(name, _)| *name == w) {
                self.pos += 1;
                return Ok(*v);
            }
        }
        let names: Vec<&str> = table.iter().map(|(n, _)| *n).collect();
        Err(self.error(&names))
    }

    fn prompt(&mut self) -> Result<PromptAst> {
        let mut objects = vec![self.object()?];
        while self.peek() == Some(";") {
            self.pos += 1;
            objects.push(self.object()?);
        }
        if self.pos < self.toks.len() {
            return Err(self.error(&[";", "then", "<end of input>"]));
        }
        Ok(PromptAst { objects })
    }

    fn object(&mut self) -> Result<ObjectClause> {
        if matches!(self.peek(), Some("a") | Some("the")) {
            self.pos += 1;
        }
        let colors = Color::ALL.map(|c| (c.name(), c));
        let shapes = Shape::ALL.map(|s| (s.name(), s));
        let cells: Vec<(&str, Cell)> = Cell::all().map(|c| (c.name(), c)).collect();
        let color = self.choose(&colors)?;
        let shape = self.choose(&shapes)?;
        self.expect("at")?;
        let position = self.choose(&cells)?;
        let mut motions = Vec::new();
        if matches!(self.peek(), Some("moves" | "turns" | "grows" | "shrinks")) {
            motions.push(self.motion()?);
            while self.peek() == Some("then") {
                self.pos += 1;
                motions.push(self.motion()?);
            }
        }
        Ok(ObjectClause { color, shape, position, motions })
    }

    fn motion(&mut self) -> Result<Motion> {
        #[derive(Clone, Copy)]
        enum Verb {
            Moves,
            Turns,
            Grows,
            Shrinks,
        }
        let verb = self.choose(&[
            ("moves", Verb::Moves),
            ("turns", Verb::Turns),
            ("grows", Verb::Grows),
            ("shrinks", Verb::Shrinks),
        ])?;
        Ok(match verb {
            Verb::Moves => Motion::Move(self.choose(&Direction::ALL.map(|d| (d.name(), d)))?),
            Verb::Turns => Motion::Turn(self.choose(&Color::ALL.map(|c| (c.name(), c)))?),
            Verb::Grows => Motion::Grow,
            Verb::Shrinks => Motion::Shrink,
        })
    }
}

/// Parses prompt text into an AST, then checks its semantic rules.
pub fn parse_prompt(text: &str) -> Result<PromptAst> {
    let mut p = Parser { toks: lex(text), pos: 0, src: text };
    let ast = p.prompt()?;
    ast.validate()?;
    Ok(ast)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_object_with_motion() {
        let a = parse_prompt("red square at top-left moves right").unwrap();
        assert_eq!(
            a.objects,
            vec![ObjectClause {
                color: Color::Red,
                shape: Shape::Square,
                position: Cell::new(0, 0),
                motions: vec![Motion::Move(Direction::Right)],
            }]
        );
    }

    #[test]
    fn two_objects_second_static() {
        let a = parse_prompt("blue circle at center turns green; a yellow triangle at bottom-right").unwrap();
        assert_eq!(a.objects.len(), 2);
        assert_eq!(a.objects[0].motions, vec![Motion::Turn(Color::Green)]);
        assert_eq!(a.objects[1].color, Color::Yellow);
        assert_eq!(a.objects[1].position, Cell::new(2, 2));
        assert!(a.objects[1].motions.is_empty());
    }

    #[test]
    fn whitespace_and_case_insensitive() {
        let a = parse_prompt("  THE Red   square\tat TOP-LEFT ;blue circle at center  ").unwrap();
        let b = parse_prompt("red square at top-left; blue circle at center").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_direction_reports_offset_and_expectations() {
        let src = "red square at top-left moves nowhere";
        match parse_prompt(src) {
            Err(Error::Syntax { offset, found, expected }) => {
                assert_eq!(found, "nowhere");
                assert_eq!(offset, src.find("nowhere").unwrap());
                assert_eq!(expected, vec!["left", "right", "up", "down"]);
            }
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_and_trailing_input() {
        assert!(matches!(parse_prompt("red square at"), Err(Error::Syntax { found, .. }) if found == "<end of input>"));
        assert!(matches!(parse_prompt(""), Err(Error::Syntax { offset: 0, .. })));
        assert!(matches!(parse_prompt("red square at center grows shrinks"), Err(Error::Syntax { .. })));
        assert!(matches!(parse_prompt("red square at center;"), Err(Error::Syntax { .. })));
    }

    #[test]
    fn two_motions_with_then() {
        let a = parse_prompt("green triangle at middle-left moves up then shrinks").unwrap();
        assert_eq!(a.objects[0].motions, vec![Motion::Move(Direction::Up), Motion::Shrink]);
    }
}
