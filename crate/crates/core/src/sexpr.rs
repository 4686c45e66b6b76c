//! Minimal s-expression reader shared by the treebank and predicted-tree
//! parsers. Atoms are maximal runs of non-whitespace, non-parenthesis bytes.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Sexpr {
    Atom(String),
    List(Vec<Sexpr>, usize),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SexprError {
    #[error("unbalanced parentheses: unmatched '(' at byte {0}")]
    Unclosed(usize),
    #[error("unbalanced parentheses: unexpected ')' at byte {0}")]
    UnexpectedClose(usize),
    #[error("bare atom outside of any bracket at byte {0}")]
    BareAtom(usize),
    #[error("empty tree \"()\" at byte {0}")]
    Empty(usize),
}

impl Sexpr {
    /// Byte offset of the opening bracket (lists) or zero for atoms.
    pub fn offset(&self) -> usize {
        match self {
            Sexpr::Atom(_) => 0,
            Sexpr::List(_, off) => *off,
        }
    }
}

/// Reads every top-level bracketed expression in `text`, in order.
pub fn parse_all(text: &str) -> Result<Vec<Sexpr>, SexprError> {
    let bytes = text.as_bytes();
    let mut stack: Vec<(usize, Vec<Sexpr>)> = Vec::new();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        match b {
            b'(' => {
                stack.push((i, Vec::new()));
                i += 1;
            }
            b')' => {
                let (open, items) = stack.pop().ok_or(SexprError::UnexpectedClose(i))?;
                if items.is_empty() {
                    return Err(SexprError::Empty(open));
                }
                let list = Sexpr::List(items, open);
                match stack.last_mut() {
                    Some((_, parent)) => parent.push(list),
                    None => out.push(list),
                }
                i += 1;
            }
            _ if b.is_ascii_whitespace() => i += 1,
            _ => {
                let start = i;
                while i < bytes.len() && !bytes[i].is_ascii_whitespace() && bytes[i] != b'(' && bytes[i] != b')' {
                    i += 1;
                }
                // Atom boundaries are ASCII bytes, so slicing stays on char boundaries.
                let atom = Sexpr::Atom(text[start..i].to_string());
                match stack.last_mut() {
                    Some((_, parent)) => parent.push(atom),
                    None => return Err(SexprError::BareAtom(start)),
                }
            }
        }
    }
    if let Some((open, _)) = stack.first() {
        return Err(SexprError::Unclosed(*open));
    }
    Ok(out)
}
