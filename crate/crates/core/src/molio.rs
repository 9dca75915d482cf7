//! Molecule container plus molfile (V2000 subset) and JSON readers/writers.
//!
//! Canonical JSON layout, compact, keys in sorted order:
//!
//! ```text
//! {"atoms":["O","H","H"],"bonds":[[0,1,1],[0,2,1]],"coords":[[0.000000,0.000000,0.117300],...]}
//! ```
//!
//! * `atoms`: element symbols; the unknown element is written as `"*"`.
//! * `bonds`: `[i, j, type]` with `i < j`, sorted by `(i, j)`; type 1..=4
//!   (single, double, triple, aromatic).
//! * `coords`: present only when the molecule has coordinates; every number is
//!   printed with exactly six decimals and negative zero is written as `0.000000`.

use std::fmt::Write as _;

use log::warn;
use serde_json::Value;
use thiserror::Error;

/// Element symbols in code order. The unknown element takes the next code.
pub const ELEMENT_SYMBOLS: [&str; 10] = ["H", "C", "N", "O", "F", "P", "S", "Cl", "Br", "I"];
pub const UNKNOWN_ELEMENT: usize = ELEMENT_SYMBOLS.len();
pub const VOCAB_SIZE: usize = ELEMENT_SYMBOLS.len() + 1;
const UNKNOWN_SYMBOL: &str = "*";

/// Fixed element vocabulary: codes `0..VOCAB_SIZE`, with [`UNKNOWN_ELEMENT`] last.
#[derive(Debug, Clone, Copy, Default)]
pub struct ElementVocabulary;

impl ElementVocabulary {
    pub fn code(symbol: &str) -> usize {
        ELEMENT_SYMBOLS
            .iter()
            .position(|s| s.eq_ignore_ascii_case(symbol))
            .unwrap_or(UNKNOWN_ELEMENT)
    }

    pub fn symbol(code: usize) -> &'static str {
        ELEMENT_SYMBOLS.get(code).copied().unwrap_or(UNKNOWN_SYMBOL)
    }

    pub const fn len() -> usize {
        VOCAB_SIZE
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BondType {
    Single = 1,
    Double = 2,
    Triple = 3,
    Aromatic = 4,
}

impl BondType {
    pub const COUNT: usize = 4;

    pub fn from_code(code: i64) -> Option<Self> {
        match code {
            1 => Some(Self::Single),
            2 => Some(Self::Double),
            3 => Some(Self::Triple),
            4 => Some(Self::Aromatic),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    /// Zero-based row in per-bond-type tables.
    pub fn index(self) -> usize {
        self as usize - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    pub kind: BondType,
}

/// Invariant violations of a molecule, independent of the input format.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StructureError {
    #[error("molecule has no atoms")]
    Empty,
    #[error("atom code {code} is outside the element vocabulary")]
    UnknownCode { code: usize },
    #[error("bond references atom {index} but the molecule has {atoms} atoms")]
    BondIndexOutOfRange { index: usize, atoms: usize },
    #[error("self-bond on atom {atom}")]
    SelfBond { atom: usize },
    #[error("duplicate bond between atoms {i} and {j}")]
    DuplicateBond { i: usize, j: usize },
    #[error("{found} coordinate rows for {expected} atoms")]
    CoordinateCount { expected: usize, found: usize },
    #[error("non-finite coordinate on atom {atom}")]
    NonFiniteCoordinate { atom: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MolError {
    #[error("molfile line {line}: {message}")]
    Molfile { line: usize, message: String },
    #[error("json {path}: {message}")]
    Json { path: String, message: String },
    #[error(transparent)]
    Structure(#[from] StructureError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Molecule {
    atom_types: Vec<usize>,
    bonds: Vec<Bond>,
    coords: Option<Vec<[f64; 3]>>,
}

impl Molecule {
    /// Validates and normalizes: bond endpoints are reordered to `i < j` and bonds are
    /// sorted by `(i, j)`.
    pub fn new(
        atom_types: Vec<usize>,
        bonds: Vec<Bond>,
        coords: Option<Vec<[f64; 3]>>,
    ) -> Result<Self, StructureError> {
        let n = atom_types.len();
        if n == 0 {
            return Err(StructureError::Empty);
        }
        if let Some(&code) = atom_types.iter().find(|&&c| c >= VOCAB_SIZE) {
            return Err(StructureError::UnknownCode { code });
        }
        let mut bonds: Vec<Bond> = bonds
            .into_iter()
            .map(|b| Bond {
                i: b.i.min(b.j),
                j: b.i.max(b.j),
                kind: b.kind,
            })
            .collect();
        for b in &bonds {
            if b.j >= n {
                return Err(StructureError::BondIndexOutOfRange {
                    index: b.j,
                    atoms: n,
                });
            }
            if b.i == b.j {
                return Err(StructureError::SelfBond { atom: b.i });
            }
        }
        bonds.sort_by_key(|b| (b.i, b.j));
        if let Some(w) = bonds
            .windows(2)
            .find(|w| (w[0].i, w[0].j) == (w[1].i, w[1].j))
        {
            return Err(StructureError::DuplicateBond {
                i: w[0].i,
                j: w[0].j,
            });
        }
        if let Some(c) = &coords {
            if c.len() != n {
                return Err(StructureError::CoordinateCount {
                    expected: n,
                    found: c.len(),
                });
            }
            if let Some(atom) = c.iter().position(|r| r.iter().any(|x| !x.is_finite())) {
                return Err(StructureError::NonFiniteCoordinate { atom });
            }
        }
        Ok(Self {
            atom_types,
            bonds,
            coords,
        })
    }

    pub fn atom_count(&self) -> usize {
        self.atom_types.len()
    }

    pub fn atom_types(&self) -> &[usize] {
        &self.atom_types
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn coords(&self) -> Option<&[[f64; 3]]> {
        self.coords.as_deref()
    }

    pub fn has_coords(&self) -> bool {
        self.coords.is_some()
    }

    /// Same molecule with coordinates replaced (or removed).
    pub fn with_coords(&self, coords: Option<Vec<[f64; 3]>>) -> Result<Self, StructureError> {
        Self::new(self.atom_types.clone(), self.bonds.clone(), coords)
    }

    /// Sorted neighbor lists with bond types.
    pub fn adjacency(&self) -> Vec<Vec<(usize, BondType)>> {
        let mut adj = vec![Vec::new(); self.atom_count()];
        for b in &self.bonds {
            adj[b.i].push((b.j, b.kind));
            adj[b.j].push((b.i, b.kind));
        }
        for list in &mut adj {
            list.sort_by_key(|&(k, _)| k);
        }
        adj
    }

    /// Relabels atoms: atom `a` of `self` becomes atom `perm[a]` of the result.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self, StructureError> {
        let n = self.atom_count();
        assert_eq!(perm.len(), n, "permutation length");
        let mut types = vec![0; n];
        for (a, &p) in perm.iter().enumerate() {
            types[p] = self.atom_types[a];
        }
        let bonds = self
            .bonds
            .iter()
            .map(|b| Bond {
                i: perm[b.i],
                j: perm[b.j],
                kind: b.kind,
            })
            .collect();
        let coords = self.coords.as_ref().map(|c| {
            let mut out = vec![[0.0; 3]; n];
            for (a, &p) in perm.iter().enumerate() {
                out[p] = c[a];
            }
            out
        });
        Self::new(types, bonds, coords)
    }
}

fn molfile_err(line: usize, message: impl Into<String>) -> MolError {
    MolError::Molfile {
        line,
        message: message.into(),
    }
}

/// Reads two or three leading integers, trying fixed 3-column fields first and
/// falling back to whitespace tokens.
fn leading_ints(line: &str, count: usize) -> Option<Vec<i64>> {
    let fixed: Option<Vec<i64>> = (0..count)
        .map(|k| line.get(3 * k..3 * k + 3)?.trim().parse().ok())
        .collect();
    fixed.or_else(|| {
        let toks: Vec<&str> = line.split_whitespace().take(count).collect();
        if toks.len() < count {
            return None;
        }
        toks.iter().map(|t| t.parse().ok()).collect()
    })
}

/// Parses a single molfile (V2000 connection table subset).
///
/// Line numbers in errors are 1-based.
pub fn parse_molfile(text: &str) -> Result<Molecule, MolError> {
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() < 4 {
        return Err(molfile_err(lines.len() + 1, "missing counts line"));
    }
    let counts_line = 4;
    let counts = leading_ints(lines[3], 2)
        .ok_or_else(|| molfile_err(counts_line, "malformed counts line"))?;
    if counts.iter().any(|&c| c < 0) {
        return Err(molfile_err(counts_line, "negative count in counts line"));
    }
    let (n_atoms, n_bonds) = (counts[0] as usize, counts[1] as usize);
    if n_atoms == 0 {
        return Err(molfile_err(counts_line, "molecule has no atoms"));
    }
    if lines.len() > 3 && !lines[3].contains("V2000") && lines[3].contains("V3000") {
        return Err(molfile_err(
            counts_line,
            "V3000 connection tables are not supported",
        ));
    }

    let mut atom_types = Vec::with_capacity(n_atoms);
    let mut coords = Vec::with_capacity(n_atoms);
    for k in 0..n_atoms {
        let line_no = 5 + k;
        let line = lines
            .get(line_no - 1)
            .ok_or_else(|| molfile_err(line_no, "atom block ends early"))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 4 {
            return Err(molfile_err(line_no, "atom line needs x y z symbol"));
        }
        let mut xyz = [0.0; 3];
        for (slot, tok) in xyz.iter_mut().zip(&toks[..3]) {
            *slot = tok
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| molfile_err(line_no, format!("bad coordinate {tok:?}")))?;
        }
        let code = ElementVocabulary::code(toks[3]);
        if code == UNKNOWN_ELEMENT {
            warn!(
                "molfile line {line_no}: unknown element {:?} mapped to UNKNOWN",
                toks[3]
            );
        }
        // mass difference, charge, stereo parity, ...
        if toks[4..].iter().any(|t| t.parse::<i64>() != Ok(0)) {
            warn!("molfile line {line_no}: atom property fields ignored");
        }
        atom_types.push(code);
        coords.push(xyz);
    }

    let mut bonds = Vec::with_capacity(n_bonds);
    let mut seen = std::collections::HashSet::new();
    for k in 0..n_bonds {
        let line_no = 5 + n_atoms + k;
        let line = lines
            .get(line_no - 1)
            .ok_or_else(|| molfile_err(line_no, "bond block ends early"))?;
        let f = leading_ints(line, 3).ok_or_else(|| molfile_err(line_no, "malformed bond line"))?;
        let (a, b) = (f[0], f[1]);
        for idx in [a, b] {
            if idx < 1 || idx as usize > n_atoms {
                return Err(molfile_err(
                    line_no,
                    format!("bond atom index {idx} out of range 1..={n_atoms}"),
                ));
            }
        }
        if a == b {
            return Err(molfile_err(line_no, format!("self-bond on atom {a}")));
        }
        let kind = BondType::from_code(f[2])
            .ok_or_else(|| molfile_err(line_no, format!("unsupported bond type {}", f[2])))?;
        let (i, j) = ((a.min(b) - 1) as usize, (a.max(b) - 1) as usize);
        if !seen.insert((i, j)) {
            return Err(molfile_err(line_no, format!("duplicate bond {a}-{b}")));
        }
        bonds.push(Bond { i, j, kind });
    }

    let props_start = 4 + n_atoms + n_bonds;
    let mut end = None;
    for (offset, line) in lines.iter().enumerate().skip(props_start) {
        if line.trim_end() == "M  END" {
            end = Some(offset);
            break;
        }
        if line.starts_with("M  ") {
            warn!("molfile line {}: property line ignored", offset + 1);
        }
    }
    if end.is_none() {
        return Err(molfile_err(lines.len() + 1, "missing \"M  END\""));
    }
    Ok(Molecule::new(atom_types, bonds, Some(coords))?)
}

fn json_err(path: impl Into<String>, message: impl Into<String>) -> MolError {
    MolError::Json {
        path: path.into(),
        message: message.into(),
    }
}

fn json_index(v: &Value, path: &str) -> Result<i64, MolError> {
    v.as_i64()
        .ok_or_else(|| json_err(path, format!("expected an integer, found {v}")))
}

/// Parses the JSON interchange form. See the module docs for the schema.
pub fn parse_json(text: &str) -> Result<Molecule, MolError> {
    let root: Value = serde_json::from_str(text).map_err(|e| json_err("$", e.to_string()))?;
    molecule_from_value(&root)
}

pub fn molecule_from_value(root: &Value) -> Result<Molecule, MolError> {
    let obj = root
        .as_object()
        .ok_or_else(|| json_err("$", "expected an object"))?;
    if let Some(key) = obj
        .keys()
        .find(|k| !matches!(k.as_str(), "atoms" | "bonds" | "coords"))
    {
        return Err(json_err(format!("$.{key}"), "unknown key"));
    }

    let atoms = obj
        .get("atoms")
        .ok_or_else(|| json_err("$.atoms", "missing"))?
        .as_array()
        .ok_or_else(|| json_err("$.atoms", "expected an array"))?;
    if atoms.is_empty() {
        return Err(json_err("$.atoms", "molecule has no atoms"));
    }
    let mut atom_types = Vec::with_capacity(atoms.len());
    for (k, a) in atoms.iter().enumerate() {
        let path = format!("$.atoms[{k}]");
        let code = match a {
            Value::String(s) => ElementVocabulary::code(s),
            Value::Number(_) => {
                let c = json_index(a, &path)?;
                if c < 0 || c as usize >= VOCAB_SIZE {
                    return Err(json_err(
                        path,
                        format!("atom code {c} outside 0..{VOCAB_SIZE}"),
                    ));
                }
                c as usize
            }
            _ => return Err(json_err(path, "expected a symbol or an atom code")),
        };
        atom_types.push(code);
    }
    let n = atom_types.len();

    let bond_vals = obj
        .get("bonds")
        .ok_or_else(|| json_err("$.bonds", "missing"))?
        .as_array()
        .ok_or_else(|| json_err("$.bonds", "expected an array"))?;
    let mut bonds = Vec::with_capacity(bond_vals.len());
    let mut seen = std::collections::HashSet::new();
    for (k, b) in bond_vals.iter().enumerate() {
        let path = format!("$.bonds[{k}]");
        let triple = b
            .as_array()
            .filter(|t| t.len() == 3)
            .ok_or_else(|| json_err(&path, "expected [i, j, type]"))?;
        let i = json_index(&triple[0], &format!("{path}[0]"))?;
        let j = json_index(&triple[1], &format!("{path}[1]"))?;
        for (slot, idx) in [(0, i), (1, j)] {
            if idx < 0 || idx as usize >= n {
                return Err(json_err(
                    format!("{path}[{slot}]"),
                    format!("atom index {idx} out of range 0..{n}"),
                ));
            }
        }
        if i == j {
            return Err(json_err(&path, format!("self-bond on atom {i}")));
        }
        let t = json_index(&triple[2], &format!("{path}[2]"))?;
        let kind = BondType::from_code(t)
            .ok_or_else(|| json_err(format!("{path}[2]"), format!("unsupported bond type {t}")))?;
        let key = (i.min(j) as usize, i.max(j) as usize);
        if !seen.insert(key) {
            return Err(json_err(
                &path,
                format!("duplicate bond {}-{}", key.0, key.1),
            ));
        }
        bonds.push(Bond {
            i: key.0,
            j: key.1,
            kind,
        });
    }

    let coords = match obj.get("coords") {
        None => None,
        Some(c) => {
            let rows = c
                .as_array()
                .ok_or_else(|| json_err("$.coords", "expected an array"))?;
            if rows.len() != n {
                return Err(json_err(
                    "$.coords",
                    format!("{} coordinate rows for {n} atoms", rows.len()),
                ));
            }
            let mut out = Vec::with_capacity(n);
            for (k, r) in rows.iter().enumerate() {
                let path = format!("$.coords[{k}]");
                let r = r
                    .as_array()
                    .filter(|r| r.len() == 3)
                    .ok_or_else(|| json_err(&path, "expected [x, y, z]"))?;
                let mut xyz = [0.0; 3];
                for (d, v) in r.iter().enumerate() {
                    xyz[d] = v.as_f64().filter(|x| x.is_finite()).ok_or_else(|| {
                        json_err(format!("{path}[{d}]"), "expected a finite number")
                    })?;
                }
                out.push(xyz);
            }
            Some(out)
        }
    };

    Ok(Molecule::new(atom_types, bonds, coords)?)
}

/// Six-decimal fixed formatting with negative zero folded to zero.
pub fn format_fixed6(x: f64) -> String {
    let s = format!("{x:.6}");
    if s == "-0.000000" {
        "0.000000".to_owned()
    } else {
        s
    }
}

/// Canonical, byte-deterministic JSON.
pub fn serialize_json(mol: &Molecule) -> String {
    let mut out = String::from("{\"atoms\":[");
    for (k, &code) in mol.atom_types.iter().enumerate() {
        if k > 0 {
            out.push(',');
        }
        let _ = write!(out, "\"{}\"", ElementVocabulary::symbol(code));
    }
    out.push_str("],\"bonds\":[");
    for (k, b) in mol.bonds.iter().enumerate() {
        if k > 0 {
            out.push(',');
        }
        let _ = write!(out, "[{},{},{}]", b.i, b.j, b.kind.code());
    }
    out.push(']');
    if let Some(coords) = &mol.coords {
        out.push_str(",\"coords\":[");
        for (k, r) in coords.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            let _ = write!(
                out,
                "[{},{},{}]",
                format_fixed6(r[0]),
                format_fixed6(r[1]),
                format_fixed6(r[2])
            );
        }
        out.push(']');
    }
    out.push('}');
    out
}
