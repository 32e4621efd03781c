//! Independent checker for the canonical output language.
//!
//! The production decoder walks a compiled automaton. This module answers the
//! same membership questions from a different direction: the template skeleton
//! is recovered by diffing two filled renderings, values are described by a
//! small shape table, and prefixes are checked by backtracking over value
//! splits. Nothing here touches the automaton.

use cagx_core::prompting::{render_filled, TemplateVariant};
use cagx_core::record::{dec, PhysiologyRecord, Slot};

/// One character position inside a value shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Lit(char),
    /// Leading digit of a measurement: `0` or `1`.
    IntDigit,
    /// Any fractional digit.
    AnyDigit,
}

impl CharClass {
    fn admits(self, c: char) -> bool {
        match self {
            CharClass::Lit(lit) => c == lit,
            CharClass::IntDigit => c == '0' || c == '1',
            CharClass::AnyDigit => c.is_ascii_digit(),
        }
    }
}

/// Every legal spelling of a single value: the literal `null`, or an integer
/// digit followed by an optional separator with one to four fractional digits.
fn value_shapes() -> Vec<Vec<CharClass>> {
    let mut shapes = vec![vec![
        CharClass::Lit('n'),
        CharClass::Lit('u'),
        CharClass::Lit('l'),
        CharClass::Lit('l'),
    ]];
    for frac_len in 0..=4usize {
        let mut shape = vec![CharClass::IntDigit];
        if frac_len > 0 {
            shape.push(CharClass::Lit('.'));
            shape.extend(std::iter::repeat(CharClass::AnyDigit).take(frac_len));
        }
        shapes.push(shape);
    }
    shapes
}

/// Recovers the fixed text between value holes by rendering the template with
/// two different single-character fills and splitting where they disagree.
pub fn skeleton(variant: TemplateVariant) -> Vec<Vec<char>> {
    let mut zeros = PhysiologyRecord::empty();
    let mut ones = PhysiologyRecord::empty();
    for slot in Slot::ALL {
        zeros.set(slot, Some(dec("0")));
        ones.set(slot, Some(dec("1")));
    }
    let a: Vec<char> = render_filled(variant, &zeros).chars().collect();
    let b: Vec<char> = render_filled(variant, &ones).chars().collect();
    assert_eq!(a.len(), b.len(), "single-character fills must align");

    let mut segments = Vec::new();
    let mut current = Vec::new();
    for (&ca, &cb) in a.iter().zip(&b) {
        if ca == cb {
            current.push(ca);
        } else {
            segments.push(std::mem::take(&mut current));
            // The differing position is the value hole itself; skip it.
        }
    }
    segments.push(current);
    assert_eq!(segments.len(), 11, "ten value holes split the template");
    segments
}

fn matches_shape(rest: &[char], shape: &[CharClass]) -> bool {
    rest.iter().zip(shape).all(|(&c, &class)| class.admits(c))
}

fn prefix_from(segments: &[Vec<char>], idx: usize, rest: &[char]) -> bool {
    let seg = &segments[idx];
    if rest.len() <= seg.len() {
        return rest == &seg[..rest.len()];
    }
    if rest[..seg.len()] != seg[..] {
        return false;
    }
    let rest = &rest[seg.len()..];
    if idx == segments.len() - 1 {
        return false; // characters beyond the closing brace
    }
    value_then_prefix(segments, idx, rest)
}

fn value_then_prefix(segments: &[Vec<char>], idx: usize, rest: &[char]) -> bool {
    for shape in value_shapes() {
        if rest.len() < shape.len() {
            if matches_shape(rest, &shape) {
                return true; // the prefix ends inside this value
            }
        } else if matches_shape(&rest[..shape.len()], &shape)
            && prefix_from(segments, idx + 1, &rest[shape.len()..])
        {
            return true;
        }
    }
    false
}

fn complete_from(segments: &[Vec<char>], idx: usize, rest: &[char]) -> bool {
    let seg = &segments[idx];
    if rest.len() < seg.len() || rest[..seg.len()] != seg[..] {
        return false;
    }
    let rest = &rest[seg.len()..];
    if idx == segments.len() - 1 {
        return rest.is_empty();
    }
    for shape in value_shapes() {
        if rest.len() >= shape.len()
            && matches_shape(&rest[..shape.len()], &shape)
            && complete_from(segments, idx + 1, &rest[shape.len()..])
        {
            return true;
        }
    }
    false
}

/// True when `text` can still be extended to a full canonical rendering.
pub fn is_valid_prefix(segments: &[Vec<char>], text: &str) -> bool {
    let chars: Vec<char> = text.chars().collect();
    prefix_from(segments, 0, &chars)
}

/// True when `text` is a full canonical rendering, nothing more or less.
pub fn is_complete_rendering(segments: &[Vec<char>], text: &str) -> bool {
    let chars: Vec<char> = text.chars().collect();
    complete_from(segments, 0, &chars)
}
