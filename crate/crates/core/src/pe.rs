//! PE container handling: parse, validate, re-serialize byte-exactly,
//! checksum, translate RVAs, and walk import tables.
//!
//! Parsing is lenient by default: structurally odd files still parse and the
//! oddities are recorded as [`Violation`]s, because hostile binaries are
//! exactly the files this framework needs to read. Strict mode turns every
//! violation into an error and is what the synthetic corpus is held to.
//!
//! A parsed [`PeFile`] keeps the original bytes untouched. `serialize`
//! patches the modelled header fields back into a copy of those bytes, so a
//! parse/serialize round trip without edits is byte-identical.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

pub const DOS_E_LFANEW_OFFSET: usize = 0x3C;
pub const COFF_HEADER_LEN: usize = 20;
pub const SECTION_HEADER_LEN: usize = 40;
pub const MAX_DATA_DIRECTORIES: usize = 16;

pub const DIR_IMPORT: usize = 1;
pub const DIR_SECURITY: usize = 4;
pub const DIR_DEBUG: usize = 6;

const PE32_MAGIC: u16 = 0x10B;
const PE32PLUS_MAGIC: u16 = 0x20B;

/// Ground-truth class of a corpus file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign,
    Malicious,
    Unknown,
}

impl core::fmt::Display for Label {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Label::Benign => write!(f, "benign"),
            Label::Malicious => write!(f, "malicious"),
            Label::Unknown => write!(f, "unknown"),
        }
    }
}

/// Compute the SHA-256 digest of a byte buffer.
pub fn sha256_digest(bytes: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().into()
}

/// A file's bytes plus its identity: digest, label, and where it came from.
#[derive(Debug, Clone)]
pub struct RawBinary {
    bytes: Vec<u8>,
    sha256: [u8; 32],
    label: Label,
    origin: String,
}

/// Rejected empty input; every corpus entry must have at least one byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmptyFile;

impl core::fmt::Display for EmptyFile {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "empty file")
    }
}

impl RawBinary {
    pub fn new(bytes: Vec<u8>, label: Label, origin: impl Into<String>) -> Result<Self, EmptyFile> {
        if bytes.is_empty() {
            return Err(EmptyFile);
        }
        let sha256 = sha256_digest(&bytes);
        Ok(RawBinary { bytes, sha256, label, origin: origin.into() })
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn sha256(&self) -> &[u8; 32] {
        &self.sha256
    }

    pub fn label(&self) -> Label {
        self.label
    }

    pub fn origin(&self) -> &str {
        &self.origin
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

/// PE32 or PE32+ optional-header flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PeFormat {
    Pe32,
    Pe32Plus,
}

/// Modelled COFF header fields. Unmodelled bytes survive untouched in the
/// raw image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoffHeader {
    pub machine: u16,
    pub number_of_sections: u16,
    pub size_of_optional_header: u16,
    pub characteristics: u16,
}

/// One data-directory slot: an RVA (or, for the certificate slot, a file
/// offset) plus a byte count.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DataDirectory {
    pub rva: u32,
    pub size: u32,
}

/// Modelled optional-header fields shared by both formats.
#[derive(Debug, Clone, PartialEq)]
pub struct OptionalHeader {
    pub format: PeFormat,
    pub entry_point_rva: u32,
    pub image_base: u64,
    pub section_alignment: u32,
    pub file_alignment: u32,
    pub size_of_image: u32,
    pub size_of_headers: u32,
    pub checksum: u32,
    pub data_directories: Vec<DataDirectory>,
}

/// One section-table row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Section {
    pub name: [u8; 8],
    pub virtual_size: u32,
    pub virtual_address: u32,
    pub raw_size: u32,
    pub raw_pointer: u32,
    pub characteristics: u32,
}

pub const SECTION_EXECUTE: u32 = 0x2000_0000;
pub const SECTION_READ: u32 = 0x4000_0000;
pub const SECTION_WRITE: u32 = 0x8000_0000;
pub const SECTION_CODE: u32 = 0x0000_0020;
pub const SECTION_INITIALIZED_DATA: u32 = 0x0000_0040;

impl Section {
    pub fn name_string(&self) -> String {
        let end = self.name.iter().position(|&b| b == 0).unwrap_or(8);
        String::from_utf8_lossy(&self.name[..end]).into_owned()
    }

    pub fn is_executable(&self) -> bool {
        self.characteristics & SECTION_EXECUTE != 0
    }

    /// End of the raw range, clamped against u32 overflow.
    pub fn raw_end(&self) -> u64 {
        self.raw_pointer as u64 + self.raw_size as u64
    }
}

/// A structural irregularity found while parsing or validating.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub section: Option<usize>,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum ViolationKind {
    /// COFF section count disagrees with the parsed table length.
    SectionCountMismatch,
    /// A section's raw data extends past the end of the file.
    RawRangeOutOfBounds,
    /// Two sections claim overlapping raw file ranges.
    RawRangeOverlap,
    /// A section's raw pointer is not file-alignment granular.
    RawPointerMisaligned,
    /// Section virtual ranges are unordered or overlapping.
    VirtualRangeDisorder,
    /// The declared optional-header size is too small for its format.
    OptionalHeaderSize,
    /// The section table runs past the end of the file.
    SectionTableTruncated,
    /// The declared data-directory count exceeds the architectural maximum.
    DataDirectoryCount,
}

impl core::fmt::Display for Violation {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self.section {
            Some(i) => write!(f, "section {}: {}", i, self.detail),
            None => write!(f, "{}", self.detail),
        }
    }
}

/// Why a buffer could not be parsed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseError {
    /// Missing MZ or PE signature; not a PE image at all.
    NotPe,
    /// A mandatory header extends past the end of the file.
    Truncated { what: &'static str },
    /// Strict mode only: the file parsed but carries violations, or uses an
    /// optional-header magic this code does not model.
    Malformed(String),
}

impl core::fmt::Display for ParseError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ParseError::NotPe => write!(f, "not a PE image"),
            ParseError::Truncated { what } => write!(f, "truncated {what}"),
            ParseError::Malformed(m) => write!(f, "malformed PE: {m}"),
        }
    }
}

/// Failure while re-serializing an edited [`PeFile`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SerializeError {
    /// The edited structure no longer matches the physical layout it must
    /// be written into.
    InconsistentLayout(String),
}

impl core::fmt::Display for SerializeError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            SerializeError::InconsistentLayout(m) => write!(f, "inconsistent layout: {m}"),
        }
    }
}

/// RVA translation failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RvaError {
    /// The RVA falls outside every section's file-backed range.
    Unmapped(u32),
}

impl core::fmt::Display for RvaError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            RvaError::Unmapped(rva) => write!(f, "rva {rva:#x} not backed by file data"),
        }
    }
}

/// Checksum computation failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChecksumError {
    /// The file is too short to contain the checksum field.
    Truncated,
}

impl core::fmt::Display for ChecksumError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "file too short for checksum field")
    }
}

/// One resolved import: the DLL and the symbol pulled from it. Ordinal
/// imports render as `#<n>`.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Import {
    pub dll: String,
    pub name: String,
}

/// A parsed PE image. Header fields are plain data and may be edited before
/// [`serialize`]; the underlying bytes are never mutated in place.
#[derive(Debug, Clone)]
pub struct PeFile {
    raw: RawBinary,
    e_lfanew: u32,
    pub coff: CoffHeader,
    pub optional: OptionalHeader,
    pub sections: Vec<Section>,
    section_table_offset: usize,
    dirs_read: usize,
    overlay_start: usize,
    violations: Vec<Violation>,
}

impl PeFile {
    pub fn bytes(&self) -> &[u8] {
        self.raw.bytes()
    }

    pub fn raw(&self) -> &RawBinary {
        &self.raw
    }

    pub fn e_lfanew(&self) -> u32 {
        self.e_lfanew
    }

    pub fn coff_offset(&self) -> usize {
        self.e_lfanew as usize + 4
    }

    pub fn number_of_sections_offset(&self) -> usize {
        self.coff_offset() + 2
    }

    pub fn optional_offset(&self) -> usize {
        self.coff_offset() + COFF_HEADER_LEN
    }

    pub fn entry_point_offset(&self) -> usize {
        self.optional_offset() + 16
    }

    pub fn size_of_image_offset(&self) -> usize {
        self.optional_offset() + 56
    }

    pub fn checksum_offset(&self) -> usize {
        self.optional_offset() + 64
    }

    fn dirs_offset(&self) -> usize {
        self.optional_offset()
            + match self.optional.format {
                PeFormat::Pe32 => 96,
                PeFormat::Pe32Plus => 112,
            }
    }

    /// File offset of data-directory slot `index`.
    pub fn dir_offset(&self, index: usize) -> usize {
        self.dirs_offset() + 8 * index
    }

    pub fn section_table_offset(&self) -> usize {
        self.section_table_offset
    }

    pub fn section_header_offset(&self, index: usize) -> usize {
        self.section_table_offset + SECTION_HEADER_LEN * index
    }

    pub fn data_directory(&self, index: usize) -> Option<DataDirectory> {
        self.optional.data_directories.get(index).copied()
    }

    /// Violations recorded at parse time (lenient mode).
    pub fn violations(&self) -> &[Violation] {
        &self.violations
    }

    /// Start of the overlay: the first byte past all header and section
    /// data. Equal to the file length when there is no overlay.
    pub fn overlay_start(&self) -> usize {
        self.overlay_start
    }

    pub fn overlay(&self) -> &[u8] {
        &self.raw.bytes()[self.overlay_start..]
    }

    /// Recompute the file checksum over the current bytes.
    pub fn computed_checksum(&self) -> Result<u32, ChecksumError> {
        compute_pe_checksum(self.raw.bytes(), self.checksum_offset())
    }
}

fn read_u16(bytes: &[u8], at: usize) -> Option<u16> {
    let end = at.checked_add(2)?;
    bytes.get(at..end).map(|b| u16::from_le_bytes([b[0], b[1]]))
}

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    let end = at.checked_add(4)?;
    bytes.get(at..end).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

fn read_u64(bytes: &[u8], at: usize) -> Option<u64> {
    let end = at.checked_add(8)?;
    bytes.get(at..end).map(|b| {
        u64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]])
    })
}

pub(crate) fn align_up(value: u64, align: u64) -> u64 {
    if align <= 1 {
        return value;
    }
    value.div_ceil(align) * align
}

/// Parse leniently: structural oddities become recorded violations.
pub fn parse_pe(bin: RawBinary) -> Result<PeFile, ParseError> {
    parse_with_mode(bin, false)
}

/// Parse strictly: any violation is an error.
pub fn parse_pe_strict(bin: RawBinary) -> Result<PeFile, ParseError> {
    parse_with_mode(bin, true)
}

fn parse_with_mode(bin: RawBinary, strict: bool) -> Result<PeFile, ParseError> {
    let bytes = bin.bytes();
    if bytes.len() < 2 || &bytes[..2] != b"MZ" {
        return Err(ParseError::NotPe);
    }
    if bytes.len() < DOS_E_LFANEW_OFFSET + 4 {
        return Err(ParseError::Truncated { what: "dos header" });
    }
    let e_lfanew = read_u32(bytes, DOS_E_LFANEW_OFFSET).unwrap();
    let sig_at = e_lfanew as usize;
    let Some(sig) = bytes.get(sig_at..sig_at + 4) else {
        return Err(ParseError::Truncated { what: "pe signature" });
    };
    if sig != b"PE\0\0" {
        return Err(ParseError::NotPe);
    }

    let coff_at = sig_at + 4;
    if coff_at + COFF_HEADER_LEN > bytes.len() {
        return Err(ParseError::Truncated { what: "coff header" });
    }
    let coff = CoffHeader {
        machine: read_u16(bytes, coff_at).unwrap(),
        number_of_sections: read_u16(bytes, coff_at + 2).unwrap(),
        size_of_optional_header: read_u16(bytes, coff_at + 16).unwrap(),
        characteristics: read_u16(bytes, coff_at + 18).unwrap(),
    };

    let opt_at = coff_at + COFF_HEADER_LEN;
    let magic = read_u16(bytes, opt_at).ok_or(ParseError::Truncated { what: "optional header" })?;
    let (format, fixed_len) = match magic {
        PE32_MAGIC => (PeFormat::Pe32, 96usize),
        PE32PLUS_MAGIC => (PeFormat::Pe32Plus, 112usize),
        other => {
            return Err(ParseError::Malformed(format!(
                "unsupported optional header magic {other:#x}"
            )))
        }
    };
    if opt_at + fixed_len > bytes.len() {
        return Err(ParseError::Truncated { what: "optional header" });
    }

    let mut violations = Vec::new();
    if (coff.size_of_optional_header as usize) < fixed_len {
        violations.push(Violation {
            kind: ViolationKind::OptionalHeaderSize,
            section: None,
            detail: format!(
                "optional header size {} smaller than fixed part {}",
                coff.size_of_optional_header, fixed_len
            ),
        });
    }

    let image_base = match format {
        PeFormat::Pe32 => read_u32(bytes, opt_at + 28).unwrap() as u64,
        PeFormat::Pe32Plus => read_u64(bytes, opt_at + 24).unwrap(),
    };
    let declared_dirs = read_u32(bytes, opt_at + fixed_len - 4).unwrap() as usize;
    if declared_dirs > MAX_DATA_DIRECTORIES {
        violations.push(Violation {
            kind: ViolationKind::DataDirectoryCount,
            section: None,
            detail: format!("{declared_dirs} data directories declared, max is 16"),
        });
    }
    let dirs_at = opt_at + fixed_len;
    let mut data_directories = Vec::new();
    for i in 0..declared_dirs.min(MAX_DATA_DIRECTORIES) {
        let at = dirs_at + 8 * i;
        match (read_u32(bytes, at), read_u32(bytes, at + 4)) {
            (Some(rva), Some(size)) => data_directories.push(DataDirectory { rva, size }),
            _ => {
                violations.push(Violation {
                    kind: ViolationKind::SectionTableTruncated,
                    section: None,
                    detail: format!("data directory {i} extends past end of file"),
                });
                break;
            }
        }
    }
    let dirs_read = data_directories.len();

    let table_at = opt_at + coff.size_of_optional_header as usize;
    let mut sections = Vec::with_capacity(coff.number_of_sections as usize);
    for i in 0..coff.number_of_sections as usize {
        let at = table_at + SECTION_HEADER_LEN * i;
        if at + SECTION_HEADER_LEN > bytes.len() {
            violations.push(Violation {
                kind: ViolationKind::SectionTableTruncated,
                section: Some(i),
                detail: format!("section header {i} extends past end of file"),
            });
            break;
        }
        let mut name = [0u8; 8];
        name.copy_from_slice(&bytes[at..at + 8]);
        sections.push(Section {
            name,
            virtual_size: read_u32(bytes, at + 8).unwrap(),
            virtual_address: read_u32(bytes, at + 12).unwrap(),
            raw_size: read_u32(bytes, at + 16).unwrap(),
            raw_pointer: read_u32(bytes, at + 20).unwrap(),
            characteristics: read_u32(bytes, at + 36).unwrap(),
        });
    }

    let optional = OptionalHeader {
        format,
        entry_point_rva: read_u32(bytes, opt_at + 16).unwrap(),
        image_base,
        section_alignment: read_u32(bytes, opt_at + 32).unwrap(),
        file_alignment: read_u32(bytes, opt_at + 36).unwrap(),
        size_of_image: read_u32(bytes, opt_at + 56).unwrap(),
        size_of_headers: read_u32(bytes, opt_at + 60).unwrap(),
        checksum: read_u32(bytes, opt_at + 64).unwrap(),
        data_directories,
    };

    let mut overlay_start = optional.size_of_headers.min(bytes.len() as u32) as usize;
    for s in &sections {
        let end = s.raw_end().min(bytes.len() as u64) as usize;
        overlay_start = overlay_start.max(end);
    }

    let mut pe = PeFile {
        raw: bin,
        e_lfanew,
        coff,
        optional,
        sections,
        section_table_offset: table_at,
        dirs_read,
        overlay_start,
        violations,
    };
    let mut all = pe.violations.clone();
    all.extend(validate(&pe));
    all.dedup();
    if strict {
        if let Some(first) = all.first() {
            return Err(ParseError::Malformed(format!("{first}")));
        }
    }
    pe.violations = all;
    Ok(pe)
}

/// Check structural invariants of the modelled headers against the file.
/// Empty result means the image is internally consistent.
pub fn validate(pe: &PeFile) -> Vec<Violation> {
    let mut out = Vec::new();
    let len = pe.bytes().len() as u64;

    if pe.coff.number_of_sections as usize != pe.sections.len() {
        out.push(Violation {
            kind: ViolationKind::SectionCountMismatch,
            section: None,
            detail: format!(
                "header declares {} sections, table holds {}",
                pe.coff.number_of_sections,
                pe.sections.len()
            ),
        });
    }

    let falign = pe.optional.file_alignment;
    for (i, s) in pe.sections.iter().enumerate() {
        if s.raw_size > 0 && s.raw_end() > len {
            out.push(Violation {
                kind: ViolationKind::RawRangeOutOfBounds,
                section: Some(i),
                detail: format!(
                    "raw range {:#x}..{:#x} exceeds file length {:#x}",
                    s.raw_pointer,
                    s.raw_end(),
                    len
                ),
            });
        }
        if falign > 1 && s.raw_pointer > 0 && s.raw_pointer % falign != 0 {
            out.push(Violation {
                kind: ViolationKind::RawPointerMisaligned,
                section: Some(i),
                detail: format!(
                    "raw pointer {:#x} not aligned to {:#x}",
                    s.raw_pointer, falign
                ),
            });
        }
    }

    let mut by_raw: Vec<(usize, &Section)> =
        pe.sections.iter().enumerate().filter(|(_, s)| s.raw_size > 0).collect();
    by_raw.sort_by_key(|(_, s)| s.raw_pointer);
    for pair in by_raw.windows(2) {
        let (ia, a) = pair[0];
        let (ib, b) = pair[1];
        if a.raw_end() > b.raw_pointer as u64 {
            out.push(Violation {
                kind: ViolationKind::RawRangeOverlap,
                section: Some(ib),
                detail: format!("raw data overlaps section {ia}"),
            });
        }
    }

    for (i, pair) in pe.sections.windows(2).enumerate() {
        let a = &pair[0];
        let b = &pair[1];
        let a_end = a.virtual_address as u64 + a.virtual_size as u64;
        if (b.virtual_address as u64) < a_end || b.virtual_address <= a.virtual_address {
            out.push(Violation {
                kind: ViolationKind::VirtualRangeDisorder,
                section: Some(i + 1),
                detail: format!(
                    "virtual address {:#x} not past previous section end {:#x}",
                    b.virtual_address, a_end
                ),
            });
        }
    }

    out
}

/// Write the modelled header fields back into a copy of the original bytes.
///
/// With no edits this returns the input bytes exactly. Structural edits that
/// no longer fit the physical layout (section list resized, header slots out
/// of bounds) are refused rather than guessed at.
pub fn serialize(pe: &PeFile) -> Result<Vec<u8>, SerializeError> {
    if pe.sections.len() != pe.coff.number_of_sections as usize {
        return Err(SerializeError::InconsistentLayout(format!(
            "section count field {} does not match {} table entries; patch both or neither",
            pe.coff.number_of_sections,
            pe.sections.len()
        )));
    }
    if pe.optional.data_directories.len() != pe.dirs_read {
        return Err(SerializeError::InconsistentLayout(format!(
            "{} data directories cannot be written into {} physical slots",
            pe.optional.data_directories.len(),
            pe.dirs_read
        )));
    }
    let mut out = pe.bytes().to_vec();
    let need = pe.section_header_offset(pe.sections.len());
    if need > out.len() {
        return Err(SerializeError::InconsistentLayout(format!(
            "section table needs {need:#x} bytes, file has {:#x}",
            out.len()
        )));
    }

    let put_u16 = |buf: &mut [u8], at: usize, v: u16| buf[at..at + 2].copy_from_slice(&v.to_le_bytes());
    let put_u32 = |buf: &mut [u8], at: usize, v: u32| buf[at..at + 4].copy_from_slice(&v.to_le_bytes());

    let coff_at = pe.coff_offset();
    put_u16(&mut out, coff_at, pe.coff.machine);
    put_u16(&mut out, coff_at + 2, pe.coff.number_of_sections);
    put_u16(&mut out, coff_at + 16, pe.coff.size_of_optional_header);
    put_u16(&mut out, coff_at + 18, pe.coff.characteristics);

    let opt_at = pe.optional_offset();
    put_u32(&mut out, opt_at + 16, pe.optional.entry_point_rva);
    match pe.optional.format {
        PeFormat::Pe32 => {
            let base = u32::try_from(pe.optional.image_base).map_err(|_| {
                SerializeError::InconsistentLayout("image base exceeds 32 bits".into())
            })?;
            put_u32(&mut out, opt_at + 28, base);
        }
        PeFormat::Pe32Plus => {
            out[opt_at + 24..opt_at + 32].copy_from_slice(&pe.optional.image_base.to_le_bytes());
        }
    }
    put_u32(&mut out, opt_at + 32, pe.optional.section_alignment);
    put_u32(&mut out, opt_at + 36, pe.optional.file_alignment);
    put_u32(&mut out, opt_at + 56, pe.optional.size_of_image);
    put_u32(&mut out, opt_at + 60, pe.optional.size_of_headers);
    put_u32(&mut out, opt_at + 64, pe.optional.checksum);

    for (i, d) in pe.optional.data_directories.iter().enumerate() {
        let at = pe.dir_offset(i);
        put_u32(&mut out, at, d.rva);
        put_u32(&mut out, at + 4, d.size);
    }

    for (i, s) in pe.sections.iter().enumerate() {
        let at = pe.section_header_offset(i);
        out[at..at + 8].copy_from_slice(&s.name);
        put_u32(&mut out, at + 8, s.virtual_size);
        put_u32(&mut out, at + 12, s.virtual_address);
        put_u32(&mut out, at + 16, s.raw_size);
        put_u32(&mut out, at + 20, s.raw_pointer);
        put_u32(&mut out, at + 36, s.characteristics);
    }

    Ok(out)
}

/// Translate an RVA to the file offset backing it.
///
/// RVAs below `size_of_headers` map one-to-one (headers are mapped at the
/// image base). Section RVAs map through the raw pointer; addresses in the
/// virtual tail of a section (past its raw data) have no file backing.
pub fn rva_to_offset(pe: &PeFile, rva: u32) -> Result<usize, RvaError> {
    let len = pe.bytes().len();
    if (rva as u64) < pe.optional.size_of_headers as u64 {
        let off = rva as usize;
        return if off < len { Ok(off) } else { Err(RvaError::Unmapped(rva)) };
    }
    for s in &pe.sections {
        if s.raw_size == 0 {
            continue;
        }
        let span = s.virtual_size.max(s.raw_size) as u64;
        let rel = (rva as u64).wrapping_sub(s.virtual_address as u64);
        if rva >= s.virtual_address && rel < span {
            if rel < s.raw_size as u64 {
                let off = s.raw_pointer as u64 + rel;
                return if off < len as u64 {
                    Ok(off as usize)
                } else {
                    Err(RvaError::Unmapped(rva))
                };
            }
            return Err(RvaError::Unmapped(rva));
        }
    }
    Err(RvaError::Unmapped(rva))
}

const MAX_IMPORT_DESCRIPTORS: usize = 256;
const MAX_IMPORTS_PER_DLL: usize = 4096;
const MAX_NAME_LEN: usize = 512;

fn read_cstr(bytes: &[u8], at: usize) -> Option<String> {
    let slice = bytes.get(at..)?;
    let end = slice.iter().take(MAX_NAME_LEN).position(|&b| b == 0)?;
    Some(String::from_utf8_lossy(&slice[..end]).into_owned())
}

/// Walk the import directory. Best effort: files without a usable table
/// yield an empty list, and the walk stops at the first malformed entry.
pub fn imports(pe: &PeFile) -> Vec<Import> {
    let mut out = Vec::new();
    let Some(dir) = pe.data_directory(DIR_IMPORT) else { return out };
    if dir.rva == 0 || dir.size == 0 {
        return out;
    }
    let bytes = pe.bytes();
    let Ok(table_at) = rva_to_offset(pe, dir.rva) else { return out };

    let thunk_len = match pe.optional.format {
        PeFormat::Pe32 => 4usize,
        PeFormat::Pe32Plus => 8usize,
    };
    let ordinal_bit = match pe.optional.format {
        PeFormat::Pe32 => 1u64 << 31,
        PeFormat::Pe32Plus => 1u64 << 63,
    };

    for desc_index in 0..MAX_IMPORT_DESCRIPTORS {
        let at = table_at + 20 * desc_index;
        let (Some(oft), Some(name_rva), Some(ft)) = (
            read_u32(bytes, at),
            read_u32(bytes, at + 12),
            read_u32(bytes, at + 16),
        ) else {
            break;
        };
        if oft == 0 && name_rva == 0 && ft == 0 {
            break;
        }
        let Some(dll) = rva_to_offset(pe, name_rva).ok().and_then(|o| read_cstr(bytes, o)) else {
            break;
        };
        let thunks_rva = if oft != 0 { oft } else { ft };
        let Ok(mut thunk_at) = rva_to_offset(pe, thunks_rva) else { break };
        for _ in 0..MAX_IMPORTS_PER_DLL {
            let entry = match pe.optional.format {
                PeFormat::Pe32 => read_u32(bytes, thunk_at).map(|v| v as u64),
                PeFormat::Pe32Plus => read_u64(bytes, thunk_at),
            };
            let Some(entry) = entry else { break };
            if entry == 0 {
                break;
            }
            let name = if entry & ordinal_bit != 0 {
                format!("#{}", entry & 0xFFFF)
            } else {
                let hint_rva = (entry & 0x7FFF_FFFF) as u32;
                match rva_to_offset(pe, hint_rva).ok().and_then(|o| read_cstr(bytes, o + 2)) {
                    Some(n) => n,
                    None => break,
                }
            };
            out.push(Import { dll: dll.clone(), name });
            thunk_at += thunk_len;
        }
    }
    out
}

/// Number of import descriptors in the table (excluding the terminator).
pub(crate) fn import_descriptor_count(pe: &PeFile) -> Option<(usize, usize)> {
    let dir = pe.data_directory(DIR_IMPORT)?;
    if dir.rva == 0 || dir.size == 0 {
        return None;
    }
    let table_at = rva_to_offset(pe, dir.rva).ok()?;
    let bytes = pe.bytes();
    for i in 0..MAX_IMPORT_DESCRIPTORS {
        let at = table_at + 20 * i;
        let (Some(oft), Some(name_rva), Some(ft)) = (
            read_u32(bytes, at),
            read_u32(bytes, at + 12),
            read_u32(bytes, at + 16),
        ) else {
            return None;
        };
        if oft == 0 && name_rva == 0 && ft == 0 {
            return Some((table_at, i));
        }
    }
    None
}

/// Compute the PE header checksum of `bytes`, treating the four bytes at
/// `checksum_offset` as zero (the field itself is excluded by definition).
///
/// The file is folded as little-endian 16-bit words with end-around carry;
/// an odd trailing byte is zero-extended; the file length is added last.
pub fn compute_pe_checksum(bytes: &[u8], checksum_offset: usize) -> Result<u32, ChecksumError> {
    let field_end = checksum_offset.checked_add(4).ok_or(ChecksumError::Truncated)?;
    if field_end > bytes.len() {
        return Err(ChecksumError::Truncated);
    }
    let mut sum: u32 = 0;
    let mut i = 0usize;
    while i < bytes.len() {
        if i < field_end && i + 2 > checksum_offset {
            i += 2;
            continue;
        }
        let lo = bytes[i] as u32;
        let hi = if i + 1 < bytes.len() { bytes[i + 1] as u32 } else { 0 };
        sum += lo | (hi << 8);
        sum = (sum & 0xFFFF) + (sum >> 16);
        i += 2;
    }
    sum = (sum & 0xFFFF) + (sum >> 16);
    Ok(sum.wrapping_add(bytes.len() as u32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use alloc::vec;

    // Independent checksum route: accumulate all words into a u64 first,
    // then fold to 16 bits. Must agree with the incremental fold.
    fn checksum_u64_route(bytes: &[u8], checksum_offset: usize) -> u32 {
        let field_end = checksum_offset + 4;
        let mut sum: u64 = 0;
        let mut i = 0usize;
        while i < bytes.len() {
            if i < field_end && i + 2 > checksum_offset {
                i += 2;
                continue;
            }
            let lo = bytes[i] as u64;
            let hi = if i + 1 < bytes.len() { bytes[i + 1] as u64 } else { 0 };
            sum += lo | (hi << 8);
            i += 2;
        }
        while sum >> 16 != 0 {
            sum = (sum & 0xFFFF) + (sum >> 16);
        }
        (sum as u32).wrapping_add(bytes.len() as u32)
    }

    #[test]
    fn checksum_known_vectors() {
        let zeros = vec![0u8; 128];
        assert_eq!(compute_pe_checksum(&zeros, 64).unwrap(), 128);

        let patterned: Vec<u8> = (0..200u32).map(|i| ((i * 7 + 3) & 0xFF) as u8).collect();
        assert_eq!(compute_pe_checksum(&patterned, 64).unwrap(), 0x2942);

        let odd: Vec<u8> = (0..131u32).map(|i| ((i * 13 + 1) & 0xFF) as u8).collect();
        assert_eq!(compute_pe_checksum(&odd, 64).unwrap(), 0x3821);

        let ones = vec![0xFFu8; 96];
        assert_eq!(compute_pe_checksum(&ones, 64).unwrap(), 0x1005F);
    }

    #[test]
    fn checksum_is_sensitive_to_single_byte_flips_outside_the_field() {
        let mut patterned: Vec<u8> = (0..200u32).map(|i| ((i * 7 + 3) & 0xFF) as u8).collect();
        patterned[10] ^= 0x5A;
        assert_eq!(compute_pe_checksum(&patterned, 64).unwrap(), 0x290C);
    }

    #[test]
    fn checksum_ignores_the_field_itself() {
        let mut buf = vec![0u8; 128];
        let base = compute_pe_checksum(&buf, 64).unwrap();
        buf[64..68].copy_from_slice(&[0xDE, 0xAD, 0xBE, 0xEF]);
        assert_eq!(compute_pe_checksum(&buf, 64).unwrap(), base);
    }

    #[test]
    fn checksum_routes_agree() {
        let mut rng = crate::seed::rng_from_seed(0x5EED);
        use rand::RngCore;
        for len in [68usize, 69, 200, 513, 4096, 4097] {
            let mut buf = vec![0u8; len];
            rng.fill_bytes(&mut buf);
            assert_eq!(
                compute_pe_checksum(&buf, 64).unwrap(),
                checksum_u64_route(&buf, 64),
                "len {len}"
            );
        }
    }

    #[test]
    fn checksum_requires_the_field_to_exist() {
        assert_eq!(compute_pe_checksum(&[0u8; 10], 64), Err(ChecksumError::Truncated));
    }

    /// A PE32 image written out field by field, independent of the builder.
    fn hand_built_pe32() -> Vec<u8> {
        let mut b = vec![0u8; 0x400];
        b[0] = b'M';
        b[1] = b'Z';
        b[0x3C..0x40].copy_from_slice(&0x80u32.to_le_bytes());
        b[0x80..0x84].copy_from_slice(b"PE\0\0");
        let coff = 0x84;
        b[coff..coff + 2].copy_from_slice(&0x014Cu16.to_le_bytes());
        b[coff + 2..coff + 4].copy_from_slice(&1u16.to_le_bytes());
        b[coff + 16..coff + 18].copy_from_slice(&224u16.to_le_bytes());
        b[coff + 18..coff + 20].copy_from_slice(&0x0102u16.to_le_bytes());
        let opt = coff + 20;
        b[opt..opt + 2].copy_from_slice(&0x10Bu16.to_le_bytes());
        b[opt + 16..opt + 20].copy_from_slice(&0x1000u32.to_le_bytes()); // entry
        b[opt + 28..opt + 32].copy_from_slice(&0x0040_0000u32.to_le_bytes()); // image base
        b[opt + 32..opt + 36].copy_from_slice(&0x1000u32.to_le_bytes()); // salign
        b[opt + 36..opt + 40].copy_from_slice(&0x200u32.to_le_bytes()); // falign
        b[opt + 56..opt + 60].copy_from_slice(&0x2000u32.to_le_bytes()); // image size
        b[opt + 60..opt + 64].copy_from_slice(&0x200u32.to_le_bytes()); // headers size
        b[opt + 64..opt + 68].copy_from_slice(&0xABCDu32.to_le_bytes()); // checksum
        b[opt + 92..opt + 96].copy_from_slice(&16u32.to_le_bytes()); // dir count
        let table = opt + 224;
        b[table..table + 6].copy_from_slice(b".text\0");
        b[table + 8..table + 12].copy_from_slice(&0x180u32.to_le_bytes()); // vsize
        b[table + 12..table + 16].copy_from_slice(&0x1000u32.to_le_bytes()); // va
        b[table + 16..table + 20].copy_from_slice(&0x200u32.to_le_bytes()); // raw size
        b[table + 20..table + 24].copy_from_slice(&0x200u32.to_le_bytes()); // raw ptr
        b[table + 36..table + 40].copy_from_slice(&0x6000_0020u32.to_le_bytes());
        b
    }

    fn bin(bytes: Vec<u8>) -> RawBinary {
        RawBinary::new(bytes, Label::Unknown, "test").unwrap()
    }

    #[test]
    fn parse_reads_the_fields_we_wrote_by_hand() {
        let pe = parse_pe(bin(hand_built_pe32())).unwrap();
        assert_eq!(pe.e_lfanew(), 0x80);
        assert_eq!(pe.coff.machine, 0x014C);
        assert_eq!(pe.coff.number_of_sections, 1);
        assert_eq!(pe.optional.format, PeFormat::Pe32);
        assert_eq!(pe.optional.entry_point_rva, 0x1000);
        assert_eq!(pe.optional.image_base, 0x0040_0000);
        assert_eq!(pe.optional.file_alignment, 0x200);
        assert_eq!(pe.optional.checksum, 0xABCD);
        assert_eq!(pe.optional.data_directories.len(), 16);
        assert_eq!(pe.sections.len(), 1);
        let s = &pe.sections[0];
        assert_eq!(s.name_string(), ".text");
        assert_eq!(s.virtual_address, 0x1000);
        assert_eq!(s.raw_pointer, 0x200);
        assert!(s.is_executable());
        assert_eq!(pe.checksum_offset(), 0x98 + 64);
        assert_eq!(pe.overlay_start(), 0x400);
        assert!(pe.violations().is_empty(), "{:?}", pe.violations());
    }

    #[test]
    fn not_pe_and_truncation_are_distinguished() {
        assert_eq!(parse_pe(bin(vec![b'X'; 100])).unwrap_err(), ParseError::NotPe);
        assert_eq!(
            parse_pe(bin(b"MZ".to_vec())).unwrap_err(),
            ParseError::Truncated { what: "dos header" }
        );
        let mut short = hand_built_pe32();
        short.truncate(0x90);
        assert!(matches!(
            parse_pe(bin(short)).unwrap_err(),
            ParseError::Truncated { .. }
        ));
        let mut bad_sig = hand_built_pe32();
        bad_sig[0x80] = b'Q';
        assert_eq!(parse_pe(bin(bad_sig)).unwrap_err(), ParseError::NotPe);
    }

    #[test]
    fn unknown_optional_magic_is_an_error_in_both_modes() {
        let mut b = hand_built_pe32();
        b[0x98] = 0x07;
        assert!(matches!(parse_pe(bin(b.clone())).unwrap_err(), ParseError::Malformed(_)));
        assert!(matches!(parse_pe_strict(bin(b)).unwrap_err(), ParseError::Malformed(_)));
    }

    #[test]
    fn lenient_records_out_of_bounds_sections_strict_rejects_them() {
        let mut b = hand_built_pe32();
        let table = 0x98 + 224;
        b[table + 16..table + 20].copy_from_slice(&0x10000u32.to_le_bytes());
        let pe = parse_pe(bin(b.clone())).unwrap();
        assert!(pe
            .violations()
            .iter()
            .any(|v| v.kind == ViolationKind::RawRangeOutOfBounds));
        assert!(matches!(parse_pe_strict(bin(b)).unwrap_err(), ParseError::Malformed(_)));
    }

    #[test]
    fn section_count_lies_are_recorded() {
        let mut b = hand_built_pe32();
        let coff = 0x84;
        b[coff + 2..coff + 4].copy_from_slice(&500u16.to_le_bytes());
        let pe = parse_pe(bin(b)).unwrap();
        assert!(pe
            .violations()
            .iter()
            .any(|v| v.kind == ViolationKind::SectionTableTruncated));
        assert!(pe
            .violations()
            .iter()
            .any(|v| v.kind == ViolationKind::SectionCountMismatch));
    }

    #[test]
    fn parse_serialize_round_trip_is_byte_identical() {
        let raw = hand_built_pe32();
        let pe = parse_pe(bin(raw.clone())).unwrap();
        assert_eq!(serialize(&pe).unwrap(), raw);

        let built = synth::build_pe(&synth::SynthSpec::full(42));
        let pe = parse_pe(bin(built.bytes.clone())).unwrap();
        assert_eq!(serialize(&pe).unwrap(), built.bytes);
    }

    #[test]
    fn no_op_field_rewrite_is_byte_identical() {
        let raw = hand_built_pe32();
        let mut pe = parse_pe(bin(raw.clone())).unwrap();
        let entry = pe.optional.entry_point_rva;
        pe.optional.entry_point_rva = entry;
        pe.sections[0].name = *b".text\0\0\0";
        assert_eq!(serialize(&pe).unwrap(), raw);
    }

    #[test]
    fn field_edits_land_at_the_documented_offsets() {
        let raw = hand_built_pe32();
        let mut pe = parse_pe(bin(raw.clone())).unwrap();
        pe.optional.checksum = 0x1122_3344;
        pe.optional.entry_point_rva = 0x1010;
        let out = serialize(&pe).unwrap();
        let opt = 0x98;
        assert_eq!(&out[opt + 64..opt + 68], &0x1122_3344u32.to_le_bytes());
        assert_eq!(&out[opt + 16..opt + 20], &0x1010u32.to_le_bytes());
        let mut expect = raw;
        expect[opt + 64..opt + 68].copy_from_slice(&0x1122_3344u32.to_le_bytes());
        expect[opt + 16..opt + 20].copy_from_slice(&0x1010u32.to_le_bytes());
        assert_eq!(out, expect);
    }

    #[test]
    fn serialize_refuses_resized_structures() {
        let raw = hand_built_pe32();
        let mut pe = parse_pe(bin(raw)).unwrap();
        pe.sections.push(pe.sections[0]);
        assert!(matches!(
            serialize(&pe).unwrap_err(),
            SerializeError::InconsistentLayout(_)
        ));
    }

    #[test]
    fn rva_translation_headers_sections_and_gaps() {
        let pe = parse_pe(bin(hand_built_pe32())).unwrap();
        assert_eq!(rva_to_offset(&pe, 0x40).unwrap(), 0x40);
        assert_eq!(rva_to_offset(&pe, 0x1000).unwrap(), 0x200);
        assert_eq!(rva_to_offset(&pe, 0x1010).unwrap(), 0x210);
        // Past raw size but inside the virtual span: no file backing.
        assert_eq!(rva_to_offset(&pe, 0x1000 + 0x300), Err(RvaError::Unmapped(0x1300)));
        assert_eq!(rva_to_offset(&pe, 0x9_0000), Err(RvaError::Unmapped(0x9_0000)));
    }

    #[test]
    fn imports_walk_both_formats() {
        for format in [PeFormat::Pe32, PeFormat::Pe32Plus] {
            let spec = synth::SynthSpec { format, ..synth::SynthSpec::full(7) };
            let built = synth::build_pe(&spec);
            let pe = parse_pe(bin(built.bytes)).unwrap();
            let imps = imports(&pe);
            assert_eq!(imps.len(), 1, "{format:?}");
            assert_eq!(imps[0].dll, "kernel32.dll");
            assert_eq!(imps[0].name, "ExitProcess");
        }
    }

    #[test]
    fn imports_empty_without_a_table() {
        let pe = parse_pe(bin(hand_built_pe32())).unwrap();
        assert!(imports(&pe).is_empty());
    }

    #[test]
    fn overlay_is_everything_past_section_data() {
        let mut raw = hand_built_pe32();
        raw.extend_from_slice(b"OVERLAY!");
        let pe = parse_pe(bin(raw)).unwrap();
        assert_eq!(pe.overlay_start(), 0x400);
        assert_eq!(pe.overlay(), b"OVERLAY!");
    }
}
