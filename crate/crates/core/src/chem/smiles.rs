//! A SMILES reader for the organic subset plus bracket atoms.
//!
//! Stereo markers (`/`, `\`, `@`), isotopes and atom classes are accepted
//! and dropped; only topology, charges and hydrogen counts survive.

use std::collections::BTreeMap;
use std::fmt;

use super::elements::{self, HYDROGEN};
use super::{implicit_hydrogen_count, Atom, Bond, BondOrder, MolecularGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseErrorKind {
    EmptyInput,
    UnbalancedParenthesis,
    UnclosedRingBond,
    UnknownElementSymbol,
    MalformedBracketAtom,
    UnexpectedCharacter,
    /// A bond symbol with nothing to attach to, a duplicate or self bond, or
    /// an aromatic bond between non-aromatic atoms.
    InvalidBond,
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParseErrorKind::EmptyInput => "empty input",
            ParseErrorKind::UnbalancedParenthesis => "unbalanced parenthesis",
            ParseErrorKind::UnclosedRingBond => "unclosed ring bond",
            ParseErrorKind::UnknownElementSymbol => "unknown element symbol",
            ParseErrorKind::MalformedBracketAtom => "malformed bracket atom",
            ParseErrorKind::UnexpectedCharacter => "unexpected character",
            ParseErrorKind::InvalidBond => "invalid bond",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("{kind} at byte {offset}")]
pub struct ParseError {
    pub kind: ParseErrorKind,
    /// Byte offset into the input where the problem was detected.
    pub offset: usize,
}

impl ParseError {
    fn new(kind: ParseErrorKind, offset: usize) -> Self {
        ParseError { kind, offset }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BondSymbol {
    Single,
    Double,
    Triple,
    Aromatic,
}

struct RawAtom {
    atom: Atom,
    bracket: bool,
    explicit_h: u8,
}

struct Parser<'a> {
    text: &'a [u8],
    pos: usize,
    atoms: Vec<RawAtom>,
    bonds: Vec<(usize, usize, Option<BondSymbol>, usize)>,
}

/// Parse a SMILES string into a heavy-atom graph.
pub fn parse_smiles(text: &str) -> Result<MolecularGraph, ParseError> {
    if text.is_empty() {
        return Err(ParseError::new(ParseErrorKind::EmptyInput, 0));
    }
    if let Some(bad) = text.bytes().position(|b| !b.is_ascii()) {
        return Err(ParseError::new(ParseErrorKind::UnexpectedCharacter, bad));
    }
    let mut parser = Parser {
        text: text.as_bytes(),
        pos: 0,
        atoms: Vec::new(),
        bonds: Vec::new(),
    };
    parser.run()?;
    parser.finish()
}

impl Parser<'_> {
    fn err<T>(&self, kind: ParseErrorKind, offset: usize) -> Result<T, ParseError> {
        Err(ParseError::new(kind, offset))
    }

    fn run(&mut self) -> Result<(), ParseError> {
        use ParseErrorKind::*;

        let mut prev: Option<usize> = None;
        // (branch root, offset of '(', atom count when opened)
        let mut branches: Vec<(Option<usize>, usize, usize)> = Vec::new();
        let mut pending: Option<(BondSymbol, usize)> = None;
        // ring number -> (atom, bond symbol at opening, offset)
        let mut rings: BTreeMap<u16, (usize, Option<BondSymbol>, usize)> = BTreeMap::new();

        while self.pos < self.text.len() {
            let start = self.pos;
            let c = self.text[start];
            match c {
                b'(' => {
                    if prev.is_none() {
                        return self.err(UnexpectedCharacter, start);
                    }
                    if let Some((_, at)) = pending {
                        return self.err(InvalidBond, at);
                    }
                    branches.push((prev, start, self.atoms.len()));
                    self.pos += 1;
                }
                b')' => {
                    let Some((root, _, opened_with)) = branches.pop() else {
                        return self.err(UnbalancedParenthesis, start);
                    };
                    if let Some((_, at)) = pending {
                        return self.err(InvalidBond, at);
                    }
                    if self.atoms.len() == opened_with {
                        return self.err(UnexpectedCharacter, start);
                    }
                    prev = root;
                    self.pos += 1;
                }
                b'-' | b'=' | b'#' | b':' | b'/' | b'\\' => {
                    if pending.is_some() || prev.is_none() {
                        return self.err(InvalidBond, start);
                    }
                    let symbol = match c {
                        b'=' => BondSymbol::Double,
                        b'#' => BondSymbol::Triple,
                        b':' => BondSymbol::Aromatic,
                        _ => BondSymbol::Single,
                    };
                    pending = Some((symbol, start));
                    self.pos += 1;
                }
                b'.' => {
                    if let Some((_, at)) = pending {
                        return self.err(InvalidBond, at);
                    }
                    if prev.is_none() {
                        return self.err(UnexpectedCharacter, start);
                    }
                    prev = None;
                    self.pos += 1;
                }
                b'0'..=b'9' | b'%' => {
                    let Some(atom) = prev else {
                        return self.err(UnexpectedCharacter, start);
                    };
                    let number = self.ring_number()?;
                    let symbol = pending.take().map(|(s, _)| s);
                    match rings.remove(&number) {
                        Some((other, open_symbol, _)) => {
                            let symbol = match (open_symbol, symbol) {
                                (Some(a), Some(b)) if a != b => {
                                    return self.err(InvalidBond, start);
                                }
                                (a, b) => a.or(b),
                            };
                            if other == atom {
                                return self.err(InvalidBond, start);
                            }
                            self.bonds.push((other, atom, symbol, start));
                        }
                        None => {
                            rings.insert(number, (atom, symbol, start));
                        }
                    }
                }
                b'[' => {
                    let idx = self.bracket_atom()?;
                    self.attach(&mut prev, &mut pending, idx)?;
                }
                _ if c.is_ascii_alphabetic() || c == b'*' => {
                    let idx = self.organic_atom()?;
                    self.attach(&mut prev, &mut pending, idx)?;
                }
                _ => return self.err(UnexpectedCharacter, start),
            }
        }

        if let Some((_, at)) = pending {
            return self.err(InvalidBond, at);
        }
        if let Some(&(_, at, _)) = branches.first() {
            return self.err(UnbalancedParenthesis, at);
        }
        if let Some(at) = rings.values().map(|r| r.2).min() {
            return self.err(UnclosedRingBond, at);
        }
        Ok(())
    }

    fn attach(
        &mut self,
        prev: &mut Option<usize>,
        pending: &mut Option<(BondSymbol, usize)>,
        idx: usize,
    ) -> Result<(), ParseError> {
        match (*prev, pending.take()) {
            (Some(p), bond) => {
                let at = bond.map(|b| b.1).unwrap_or(self.pos);
                self.bonds.push((p, idx, bond.map(|b| b.0), at));
            }
            (None, Some((_, at))) => return self.err(ParseErrorKind::InvalidBond, at),
            (None, None) => {}
        }
        *prev = Some(idx);
        Ok(())
    }

    fn ring_number(&mut self) -> Result<u16, ParseError> {
        let start = self.pos;
        if self.text[start] == b'%' {
            let digits = self.text.get(start + 1..start + 3);
            match digits {
                Some(d) if d.iter().all(u8::is_ascii_digit) => {
                    self.pos += 3;
                    Ok(((d[0] - b'0') * 10 + (d[1] - b'0')) as u16)
                }
                _ => self.err(ParseErrorKind::UnexpectedCharacter, start),
            }
        } else {
            self.pos += 1;
            Ok((self.text[start] - b'0') as u16)
        }
    }

    fn organic_atom(&mut self) -> Result<usize, ParseError> {
        let start = self.pos;
        let rest = &self.text[start..];
        let (element, aromatic, len) = match rest {
            [b'C', b'l', ..] => (elements::CHLORINE, false, 2),
            [b'B', b'r', ..] => (elements::BROMINE, false, 2),
            [b'B', ..] => (elements::BORON, false, 1),
            [b'C', ..] => (elements::CARBON, false, 1),
            [b'N', ..] => (elements::NITROGEN, false, 1),
            [b'O', ..] => (elements::OXYGEN, false, 1),
            [b'P', ..] => (elements::PHOSPHORUS, false, 1),
            [b'S', ..] => (elements::SULFUR, false, 1),
            [b'F', ..] => (elements::FLUORINE, false, 1),
            [b'I', ..] => (elements::IODINE, false, 1),
            [b'b', ..] => (elements::BORON, true, 1),
            [b'c', ..] => (elements::CARBON, true, 1),
            [b'n', ..] => (elements::NITROGEN, true, 1),
            [b'o', ..] => (elements::OXYGEN, true, 1),
            [b'p', ..] => (elements::PHOSPHORUS, true, 1),
            [b's', ..] => (elements::SULFUR, true, 1),
            _ => return self.err(ParseErrorKind::UnknownElementSymbol, start),
        };
        self.pos += len;
        self.atoms.push(RawAtom {
            atom: Atom {
                aromatic,
                ..Atom::new(element)
            },
            bracket: false,
            explicit_h: 0,
        });
        Ok(self.atoms.len() - 1)
    }

    fn bracket_atom(&mut self) -> Result<usize, ParseError> {
        use ParseErrorKind::*;

        let open = self.pos;
        let Some(len) = self.text[open..].iter().position(|&b| b == b']') else {
            return self.err(MalformedBracketAtom, open);
        };
        let close = open + len;
        let body = &self.text[open + 1..close];
        let mut i = 0;
        let malformed = || ParseError::new(MalformedBracketAtom, open);

        // isotope
        while i < body.len() && body[i].is_ascii_digit() {
            i += 1;
        }
        if i > 3 {
            return Err(malformed());
        }

        // element symbol
        let symbol_at = open + 1 + i;
        let (element, aromatic) = match body.get(i) {
            Some(c) if c.is_ascii_uppercase() => {
                let two = body
                    .get(i + 1)
                    .filter(|n| n.is_ascii_lowercase())
                    .and_then(|&n| elements::atomic_number(std::str::from_utf8(&[*c, n]).ok()?));
                match two {
                    Some(z) => {
                        i += 2;
                        (z, false)
                    }
                    None => {
                        let one = elements::atomic_number(std::str::from_utf8(&[*c]).unwrap());
                        match one {
                            Some(z) => {
                                i += 1;
                                (z, false)
                            }
                            None => return self.err(UnknownElementSymbol, symbol_at),
                        }
                    }
                }
            }
            Some(c) if c.is_ascii_lowercase() => {
                let two = body.get(i + 1).and_then(|&n| match (*c, n) {
                    (b's', b'e') => Some(elements::SELENIUM),
                    (b'a', b's') => Some(33),
                    (b't', b'e') => Some(52),
                    _ => None,
                });
                if let Some(z) = two {
                    i += 2;
                    (z, true)
                } else {
                    let z = match c {
                        b'b' => elements::BORON,
                        b'c' => elements::CARBON,
                        b'n' => elements::NITROGEN,
                        b'o' => elements::OXYGEN,
                        b'p' => elements::PHOSPHORUS,
                        b's' => elements::SULFUR,
                        _ => return self.err(UnknownElementSymbol, symbol_at),
                    };
                    i += 1;
                    (z, true)
                }
            }
            Some(b'*') => return self.err(UnknownElementSymbol, symbol_at),
            _ => return Err(malformed()),
        };

        // chirality: @, @@, @TH1, @SP2, @OH15 ...
        if body.get(i) == Some(&b'@') {
            i += 1;
            if body.get(i) == Some(&b'@') {
                i += 1;
            } else if let Some(tag) = body.get(i..i + 2) {
                if matches!(tag, b"TH" | b"AL" | b"SP" | b"TB" | b"OH") {
                    i += 2;
                    let digits = body[i..].iter().take_while(|b| b.is_ascii_digit()).count();
                    if digits == 0 {
                        return Err(malformed());
                    }
                    i += digits;
                }
            }
        }

        // hydrogen count
        let mut explicit_h = 0u8;
        if body.get(i) == Some(&b'H') {
            i += 1;
            let digits = body[i..].iter().take_while(|b| b.is_ascii_digit()).count();
            explicit_h = if digits == 0 {
                1
            } else {
                std::str::from_utf8(&body[i..i + digits])
                    .ok()
                    .and_then(|s| s.parse::<u8>().ok())
                    .filter(|&h| h <= 16)
                    .ok_or_else(malformed)?
            };
            i += digits;
        }

        // charge: +, ++, +2, -, --, -3
        let mut charge: i32 = 0;
        if let Some(&sign) = body.get(i).filter(|&&b| b == b'+' || b == b'-') {
            let unit = if sign == b'+' { 1 } else { -1 };
            i += 1;
            let digits = body[i..].iter().take_while(|b| b.is_ascii_digit()).count();
            if digits > 0 {
                let magnitude: i32 = std::str::from_utf8(&body[i..i + digits])
                    .ok()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(malformed)?;
                charge = unit * magnitude;
                i += digits;
            } else {
                charge = unit;
                while body.get(i) == Some(&sign) {
                    charge += unit;
                    i += 1;
                }
            }
            if charge.abs() > 15 {
                return Err(malformed());
            }
        }

        // atom class
        if body.get(i) == Some(&b':') {
            i += 1;
            let digits = body[i..].iter().take_while(|b| b.is_ascii_digit()).count();
            if digits == 0 {
                return Err(malformed());
            }
            i += digits;
        }

        if i != body.len() {
            return Err(malformed());
        }
        self.pos = close + 1;
        self.atoms.push(RawAtom {
            atom: Atom {
                aromatic,
                formal_charge: charge as i8,
                ..Atom::new(element)
            },
            bracket: true,
            explicit_h,
        });
        Ok(self.atoms.len() - 1)
    }

    fn finish(self) -> Result<MolecularGraph, ParseError> {
        let Parser { atoms, bonds, .. } = self;
        let n = atoms.len();

        let mut seen = std::collections::HashSet::new();
        let mut resolved = Vec::with_capacity(bonds.len());
        for (a, b, symbol, at) in bonds {
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(ParseError::new(ParseErrorKind::InvalidBond, at));
            }
            let both_aromatic = atoms[a].atom.aromatic && atoms[b].atom.aromatic;
            let order = match symbol {
                None if both_aromatic => BondOrder::Aromatic,
                None | Some(BondSymbol::Single) => BondOrder::Single,
                Some(BondSymbol::Double) => BondOrder::Double,
                Some(BondSymbol::Triple) => BondOrder::Triple,
                Some(BondSymbol::Aromatic) if both_aromatic => BondOrder::Aromatic,
                Some(BondSymbol::Aromatic) => {
                    return Err(ParseError::new(ParseErrorKind::InvalidBond, at))
                }
            };
            resolved.push(Bond {
                endpoints: (a, b),
                order,
            });
        }

        let mut incident: Vec<Vec<BondOrder>> = vec![Vec::new(); n];
        let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
        for bond in &resolved {
            let (a, b) = bond.endpoints;
            incident[a].push(bond.order);
            incident[b].push(bond.order);
            neighbors[a].push(b);
            neighbors[b].push(a);
        }

        let mut hydrogens: Vec<u32> = Vec::with_capacity(n);
        for (raw, orders) in atoms.iter().zip(&incident) {
            let h = if raw.bracket {
                raw.explicit_h
            } else {
                // organic-subset atoms always have a valence entry
                implicit_hydrogen_count(&raw.atom, orders).unwrap_or(0)
            };
            hydrogens.push(h as u32);
        }

        // Fold explicit hydrogen atoms into their single heavy neighbour.
        let is_folded: Vec<bool> = (0..n)
            .map(|i| {
                let raw = &atoms[i];
                raw.atom.element == HYDROGEN
                    && raw.atom.formal_charge == 0
                    && neighbors[i].len() == 1
                    && atoms[neighbors[i][0]].atom.element != HYDROGEN
            })
            .collect();
        for i in 0..n {
            if is_folded[i] {
                let host = neighbors[i][0];
                hydrogens[host] += 1 + hydrogens[i];
            }
        }
        let mut new_index = vec![usize::MAX; n];
        let mut kept = Vec::new();
        for (i, raw) in atoms.into_iter().enumerate() {
            if !is_folded[i] {
                new_index[i] = kept.len();
                let mut atom = raw.atom;
                atom.implicit_hydrogens = hydrogens[i].min(u8::MAX as u32) as u8;
                kept.push(atom);
            }
        }
        let kept_bonds = resolved
            .into_iter()
            .filter(|b| !is_folded[b.endpoints.0] && !is_folded[b.endpoints.1])
            .map(|b| Bond {
                endpoints: (new_index[b.endpoints.0], new_index[b.endpoints.1]),
                order: b.order,
            })
            .collect();

        // Every invariant MolecularGraph checks has been enforced above.
        Ok(MolecularGraph::new(kept, kept_bonds).expect("parser produced an invalid graph"))
    }
}
