//! Functionality-preserving PE modifications and randomized chains of them.
//!
//! Every modification here leaves program behavior alone: names, slack
//! bytes, appended data, unused imports, a jump stub in front of the old
//! entry point, or metadata a loader ignores. Each one declares its exact
//! byte-level diff as an edit list, so tests can prove nothing else moved.
//!
//! A chain draws modifications uniformly from the currently applicable set,
//! rescoring after each step until the detector gives in or the step budget
//! runs out. Chains are replayable: the per-step draw order (first the kind
//! index into the applicable list, then one `u64` step seed) is part of the
//! contract, and each record carries everything needed to reproduce it.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;

use crate::detect::{Decision, DetectorError, DetectorHandle};
use crate::edit::{Edit, SpliceError, Splicer};
use crate::pe::{
    align_up, import_descriptor_count, imports, parse_pe, rva_to_offset, sha256_digest, Label,
    ParseError, PeFile, PeFormat, RawBinary, DIR_DEBUG, DIR_IMPORT, DIR_SECURITY,
};
use crate::seed::rng_from_seed;

/// The nine modification families, in their fixed draw order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum MutationKind {
    RenameSection,
    AddSection,
    AppendToSection,
    AppendOverlay,
    AddImport,
    NewEntryPoint,
    ZeroChecksum,
    StripSignature,
    ScrambleDebug,
}

pub const ALL_KINDS: [MutationKind; 9] = [
    MutationKind::RenameSection,
    MutationKind::AddSection,
    MutationKind::AppendToSection,
    MutationKind::AppendOverlay,
    MutationKind::AddImport,
    MutationKind::NewEntryPoint,
    MutationKind::ZeroChecksum,
    MutationKind::StripSignature,
    MutationKind::ScrambleDebug,
];

/// A performed modification with its drawn parameters.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum MutationAction {
    RenameSection { index: usize, new_name: [u8; 8] },
    AddSection { name: [u8; 8], data_len: u32 },
    AppendToSection { index: usize, count: u32 },
    AppendOverlay { count: u32 },
    AddImport { dll: String, function: String },
    NewEntryPoint { stub_rva: u32, old_entry_rva: u32 },
    ZeroChecksum,
    StripSignature,
    ScrambleDebug,
}

impl MutationAction {
    pub fn kind(&self) -> MutationKind {
        match self {
            MutationAction::RenameSection { .. } => MutationKind::RenameSection,
            MutationAction::AddSection { .. } => MutationKind::AddSection,
            MutationAction::AppendToSection { .. } => MutationKind::AppendToSection,
            MutationAction::AppendOverlay { .. } => MutationKind::AppendOverlay,
            MutationAction::AddImport { .. } => MutationKind::AddImport,
            MutationAction::NewEntryPoint { .. } => MutationKind::NewEntryPoint,
            MutationAction::ZeroChecksum => MutationKind::ZeroChecksum,
            MutationAction::StripSignature => MutationKind::StripSignature,
            MutationAction::ScrambleDebug => MutationKind::ScrambleDebug,
        }
    }
}

/// Output of one modification: the new file, plus the declared diff. An
/// empty edit list marks a provable no-op (e.g. stripping an absent
/// signature), which chains record rather than hide.
#[derive(Debug, Clone)]
pub struct MutationOutput {
    pub bytes: Vec<u8>,
    pub edits: Vec<Edit>,
    pub action: MutationAction,
}

impl MutationOutput {
    pub fn is_noop(&self) -> bool {
        self.edits.is_empty()
    }
}

/// Why a modification could not run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MutationError {
    /// The file has no sections to operate on.
    NoSections,
    /// No room left in the header region for another section-table row.
    NoHeaderSlack,
    /// No section has slack to fill or a growable tail.
    NoSlack,
    /// The file has no usable import directory to extend.
    NoImportDirectory,
    /// The import pool is exhausted or the header cannot take the table.
    NoRoom,
    /// A chain found no applicable modification at all.
    AllActionsInapplicable,
    /// The file's physical layout defeats the modification (bad alignment
    /// fields, self-overlapping structures, arithmetic overflow).
    Layout(&'static str),
}

impl core::fmt::Display for MutationError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            MutationError::NoSections => write!(f, "file has no sections"),
            MutationError::NoHeaderSlack => write!(f, "no header room for another section"),
            MutationError::NoSlack => write!(f, "no section slack to use"),
            MutationError::NoImportDirectory => write!(f, "no usable import directory"),
            MutationError::NoRoom => write!(f, "import table cannot grow"),
            MutationError::AllActionsInapplicable => {
                write!(f, "no modification applies to this file")
            }
            MutationError::Layout(m) => write!(f, "layout defeats modification: {m}"),
        }
    }
}

impl From<SpliceError> for MutationError {
    fn from(_: SpliceError) -> Self {
        MutationError::Layout("edit list collided with itself")
    }
}

/// Plausible section names drawn for renames and new sections.
pub const SECTION_NAME_POOL: [[u8; 8]; 5] = [
    *b".text\0\0\0",
    *b".rdata\0\0",
    *b".data\0\0\0",
    *b".rsrc\0\0\0",
    *b".reloc\0\0",
];

/// Benign, argumentless APIs safe to import and never call.
pub const IMPORT_POOL: [(&str, &str); 16] = [
    ("kernel32.dll", "GetTickCount"),
    ("kernel32.dll", "GetCurrentProcessId"),
    ("kernel32.dll", "GetCurrentThreadId"),
    ("kernel32.dll", "GetVersion"),
    ("kernel32.dll", "GetLastError"),
    ("kernel32.dll", "GetCommandLineA"),
    ("kernel32.dll", "GetSystemTimeAsFileTime"),
    ("kernel32.dll", "IsDebuggerPresent"),
    ("user32.dll", "GetDoubleClickTime"),
    ("user32.dll", "GetDialogBaseUnits"),
    ("user32.dll", "GetMessagePos"),
    ("user32.dll", "GetCaretBlinkTime"),
    ("advapi32.dll", "RevertToSelf"),
    ("advapi32.dll", "AllocateLocallyUniqueId"),
    ("gdi32.dll", "GetStockObject"),
    ("gdi32.dll", "GdiFlush"),
];

const MIN_APPEND: u32 = 16;
const MAX_APPEND: u32 = 1024;

fn noop(pe: &PeFile, action: MutationAction) -> MutationOutput {
    MutationOutput { bytes: pe.bytes().to_vec(), edits: Vec::new(), action }
}

fn alignments_ok(pe: &PeFile) -> bool {
    pe.optional.file_alignment.is_power_of_two()
        && pe.optional.section_alignment.is_power_of_two()
}

/// Whether one more section-table row fits: inside the file, inside the
/// declared header region, and before any section's raw data.
fn header_slot_available(pe: &PeFile) -> bool {
    let slot_end = pe.section_header_offset(pe.sections.len()) + 40;
    if slot_end > pe.bytes().len() || slot_end > pe.optional.size_of_headers as usize {
        return false;
    }
    if pe.sections.len() >= u16::MAX as usize {
        return false;
    }
    !pe
        .sections
        .iter()
        .any(|s| s.raw_size > 0 && (s.raw_pointer as usize) < slot_end)
}

/// Placement for a brand-new section: virtual address, raw pointer, raw
/// size, EOF padding, and the updated image size.
struct NewSectionPlan {
    va: u32,
    raw_ptr: u32,
    raw_size: u32,
    eof_pad: usize,
    size_of_image: u32,
}

fn plan_new_section(pe: &PeFile, data_len: u32) -> Result<NewSectionPlan, MutationError> {
    if !alignments_ok(pe) {
        return Err(MutationError::Layout("alignment fields are not powers of two"));
    }
    let salign = pe.optional.section_alignment as u64;
    let falign = pe.optional.file_alignment as u64;
    let va_base = pe
        .sections
        .iter()
        .map(|s| s.virtual_address as u64 + s.virtual_size as u64)
        .max()
        .unwrap_or(0)
        .max(salign);
    let va = align_up(va_base, salign);
    let file_len = pe.bytes().len() as u64;
    let raw_ptr = align_up(file_len, falign);
    let raw_size = align_up(data_len as u64, falign);
    let image_end = align_up(va + data_len as u64, salign);
    let size_of_image = image_end.max(pe.optional.size_of_image as u64);
    if va > u32::MAX as u64
        || raw_ptr > u32::MAX as u64
        || raw_size > u32::MAX as u64
        || size_of_image > u32::MAX as u64
    {
        return Err(MutationError::Layout("image would outgrow 32-bit addressing"));
    }
    Ok(NewSectionPlan {
        va: va as u32,
        raw_ptr: raw_ptr as u32,
        raw_size: raw_size as u32,
        eof_pad: (raw_ptr - file_len) as usize,
        size_of_image: size_of_image as u32,
    })
}

fn section_header_bytes(
    name: [u8; 8],
    virtual_size: u32,
    va: u32,
    raw_size: u32,
    raw_ptr: u32,
    characteristics: u32,
) -> Vec<u8> {
    let mut h = vec![0u8; 40];
    h[..8].copy_from_slice(&name);
    h[8..12].copy_from_slice(&virtual_size.to_le_bytes());
    h[12..16].copy_from_slice(&va.to_le_bytes());
    h[16..20].copy_from_slice(&raw_size.to_le_bytes());
    h[20..24].copy_from_slice(&raw_ptr.to_le_bytes());
    h[36..40].copy_from_slice(&characteristics.to_le_bytes());
    h
}

/// Shared tail of every section-adding modification: count, image size,
/// table row, and the data appended at end of file.
fn splice_new_section(
    pe: &PeFile,
    plan: &NewSectionPlan,
    name: [u8; 8],
    virtual_size: u32,
    characteristics: u32,
    content: &[u8],
) -> Result<(Vec<u8>, Vec<Edit>), MutationError> {
    let n = pe.sections.len();
    let mut sp = Splicer::new(pe.bytes());
    sp.replace(
        pe.number_of_sections_offset(),
        2,
        ((n + 1) as u16).to_le_bytes().to_vec(),
    );
    sp.replace(pe.size_of_image_offset(), 4, plan.size_of_image.to_le_bytes().to_vec());
    sp.replace(
        pe.section_header_offset(n),
        40,
        section_header_bytes(name, virtual_size, plan.va, plan.raw_size, plan.raw_ptr, characteristics),
    );
    let mut blob = vec![0u8; plan.eof_pad + plan.raw_size as usize];
    blob[plan.eof_pad..plan.eof_pad + content.len()].copy_from_slice(content);
    sp.insert(pe.bytes().len(), blob);
    Ok(sp.apply()?)
}

/// Give one section a different plausible name.
pub fn rename_section(
    pe: &PeFile,
    index: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MutationOutput, MutationError> {
    let Some(section) = pe.sections.get(index) else {
        return Err(MutationError::NoSections);
    };
    let candidates: Vec<[u8; 8]> = SECTION_NAME_POOL
        .iter()
        .copied()
        .filter(|n| *n != section.name)
        .collect();
    let new_name = candidates[rng.gen_range(0..candidates.len())];
    let mut sp = Splicer::new(pe.bytes());
    sp.replace(pe.section_header_offset(index), 8, new_name.to_vec());
    let (bytes, edits) = sp.apply()?;
    Ok(MutationOutput {
        bytes,
        edits,
        action: MutationAction::RenameSection { index, new_name },
    })
}

/// Append a fresh data section of random filler.
pub fn add_section(pe: &PeFile, rng: &mut ChaCha8Rng) -> Result<MutationOutput, MutationError> {
    if !header_slot_available(pe) {
        return Err(MutationError::NoHeaderSlack);
    }
    let name = SECTION_NAME_POOL[rng.gen_range(0..SECTION_NAME_POOL.len())];
    let data_len: u32 = rng.gen_range(64..=4096);
    let plan = plan_new_section(pe, data_len)?;
    let mut content = vec![0u8; data_len as usize];
    rng.fill_bytes(&mut content);
    let (bytes, edits) =
        splice_new_section(pe, &plan, name, data_len, 0x4000_0040, &content)?;
    Ok(MutationOutput { bytes, edits, action: MutationAction::AddSection { name, data_len } })
}

/// Sections whose raw data can take appended bytes, with available slack
/// and whether the section's tail can physically grow.
fn appendable_sections(pe: &PeFile) -> Vec<(usize, u32, bool)> {
    let len = pe.bytes().len() as u64;
    let max_raw_end = pe
        .sections
        .iter()
        .filter(|s| s.raw_size > 0)
        .map(|s| s.raw_end())
        .max()
        .unwrap_or(0);
    let max_va_end = pe
        .sections
        .iter()
        .map(|s| s.virtual_address as u64 + s.virtual_size as u64)
        .max()
        .unwrap_or(0);
    pe.sections
        .iter()
        .enumerate()
        .filter(|(_, s)| s.raw_size > 0 && s.raw_end() <= len)
        .filter_map(|(i, s)| {
            let used = s.virtual_size.min(s.raw_size);
            let slack = s.raw_size - used;
            let growable = alignments_ok(pe)
                && s.raw_end() == max_raw_end
                && s.virtual_address as u64 + s.virtual_size as u64 == max_va_end;
            if slack >= MIN_APPEND || growable {
                Some((i, slack, growable))
            } else {
                None
            }
        })
        .collect()
}

/// Write `count` random bytes after a section's content: into raw slack
/// when it fits, by growing the file's last section otherwise.
pub fn append_to_section(
    pe: &PeFile,
    index: usize,
    count: u32,
    rng: &mut ChaCha8Rng,
) -> Result<MutationOutput, MutationError> {
    let Some(section) = pe.sections.get(index).copied() else {
        return Err(MutationError::NoSections);
    };
    let action = MutationAction::AppendToSection { index, count };
    if count == 0 {
        return Ok(noop(pe, action));
    }
    if section.raw_size == 0 {
        return Err(MutationError::NoSlack);
    }
    if section.raw_end() > pe.bytes().len() as u64 {
        return Err(MutationError::Layout("section raw data extends past end of file"));
    }
    let used = section.virtual_size.min(section.raw_size);
    let slack = section.raw_size - used;
    let content_at = section.raw_pointer as usize + used as usize;

    if count <= slack {
        let mut fill = vec![0u8; count as usize];
        rng.fill_bytes(&mut fill);
        let mut sp = Splicer::new(pe.bytes());
        sp.replace(content_at, count as usize, fill);
        let (bytes, edits) = sp.apply()?;
        return Ok(MutationOutput { bytes, edits, action });
    }

    let eligible = appendable_sections(pe);
    let growable = eligible.iter().any(|&(i, _, g)| i == index && g);
    if !growable {
        return Err(MutationError::NoSlack);
    }
    let falign = pe.optional.file_alignment as u64;
    let old_end = section.raw_end() as usize;
    let new_content_len = used as u64 + count as u64;
    let new_raw = align_up(new_content_len, falign);
    if new_raw > u32::MAX as u64 {
        return Err(MutationError::Layout("section would outgrow 32-bit sizes"));
    }
    let delta = (new_raw - section.raw_size as u64) as usize;

    let mut fill = vec![0u8; (new_raw - used as u64) as usize];
    rng.fill_bytes(&mut fill[..count as usize]);

    let mut sp = Splicer::new(pe.bytes());
    sp.replace(content_at, slack as usize, fill);
    sp.replace(
        pe.section_header_offset(index) + 16,
        4,
        (new_raw as u32).to_le_bytes().to_vec(),
    );
    let new_vsize = (section.virtual_size as u64).max(new_content_len);
    if new_vsize != section.virtual_size as u64 {
        if new_vsize > u32::MAX as u64 {
            return Err(MutationError::Layout("section would outgrow 32-bit sizes"));
        }
        sp.replace(
            pe.section_header_offset(index) + 8,
            4,
            (new_vsize as u32).to_le_bytes().to_vec(),
        );
        let image_end = align_up(
            section.virtual_address as u64 + new_vsize,
            pe.optional.section_alignment as u64,
        );
        if image_end > pe.optional.size_of_image as u64 {
            if image_end > u32::MAX as u64 {
                return Err(MutationError::Layout("image would outgrow 32-bit addressing"));
            }
            sp.replace(
                pe.size_of_image_offset(),
                4,
                (image_end as u32).to_le_bytes().to_vec(),
            );
        }
    }

    // File offsets stored in headers shift when bytes are inserted mid-file.
    if let Some(cert) = pe.data_directory(DIR_SECURITY) {
        if cert.rva != 0 && cert.size != 0 && cert.rva as usize >= old_end {
            let moved = (cert.rva as u64)
                .checked_add(delta as u64)
                .filter(|&v| v <= u32::MAX as u64)
                .ok_or(MutationError::Layout("certificate offset would overflow"))?;
            sp.replace(
                pe.dir_offset(DIR_SECURITY),
                4,
                (moved as u32).to_le_bytes().to_vec(),
            );
        }
    }
    for (ptr_at, ptr) in debug_raw_pointer_fields(pe) {
        if ptr != 0 && ptr as usize >= old_end {
            let moved = (ptr as u64)
                .checked_add(delta as u64)
                .filter(|&v| v <= u32::MAX as u64)
                .ok_or(MutationError::Layout("debug payload offset would overflow"))?;
            sp.replace(ptr_at, 4, (moved as u32).to_le_bytes().to_vec());
        }
    }

    let (bytes, edits) = sp.apply()?;
    Ok(MutationOutput { bytes, edits, action })
}

/// Append `count` random bytes after everything else in the file.
pub fn append_overlay(
    pe: &PeFile,
    count: u32,
    rng: &mut ChaCha8Rng,
) -> Result<MutationOutput, MutationError> {
    let action = MutationAction::AppendOverlay { count };
    if count == 0 {
        return Ok(noop(pe, action));
    }
    let mut blob = vec![0u8; count as usize];
    rng.fill_bytes(&mut blob);
    let mut sp = Splicer::new(pe.bytes());
    sp.insert(pe.bytes().len(), blob);
    let (bytes, edits) = sp.apply()?;
    Ok(MutationOutput { bytes, edits, action })
}

/// First pool entry the file does not already import, scanning from a
/// random start so repeated applications spread across the pool.
fn pick_unused_import(pe: &PeFile, rng: &mut ChaCha8Rng) -> Option<(&'static str, &'static str)> {
    let existing = imports(pe);
    let start = rng.gen_range(0..IMPORT_POOL.len());
    (0..IMPORT_POOL.len())
        .map(|k| IMPORT_POOL[(start + k) % IMPORT_POOL.len()])
        .find(|(dll, func)| {
            !existing
                .iter()
                .any(|i| i.dll.eq_ignore_ascii_case(dll) && i.name == *func)
        })
}

/// Add one never-called function to the import table.
///
/// The descriptor table is rebuilt in a new section: existing descriptors
/// are copied verbatim (their RVAs stay valid), one new descriptor plus its
/// lookup tables and names are appended, and the import directory is
/// repointed. Existing section bytes are never touched.
pub fn add_import(pe: &PeFile, rng: &mut ChaCha8Rng) -> Result<MutationOutput, MutationError> {
    let Some((table_at, n_desc)) = import_descriptor_count(pe) else {
        return Err(MutationError::NoImportDirectory);
    };
    let Some((dll, function)) = pick_unused_import(pe, rng) else {
        return Err(MutationError::NoRoom);
    };
    if !header_slot_available(pe) {
        return Err(MutationError::NoRoom);
    }
    let thunk_len = match pe.optional.format {
        PeFormat::Pe32 => 4usize,
        PeFormat::Pe32Plus => 8,
    };

    let desc_len = 20 * (n_desc + 2);
    let ilt_off = desc_len;
    let iat_off = ilt_off + 2 * thunk_len;
    let hint_off = iat_off + 2 * thunk_len;
    let hint_len = 2 + function.len() + 1;
    let dll_off = hint_off + hint_len + (hint_len & 1);
    let data_len = dll_off + dll.len() + 1;
    if data_len > u32::MAX as usize {
        return Err(MutationError::Layout("import table too large"));
    }
    let plan = plan_new_section(pe, data_len as u32)?;
    let va = plan.va as usize;

    let mut content = vec![0u8; data_len];
    content[..20 * n_desc].copy_from_slice(&pe.bytes()[table_at..table_at + 20 * n_desc]);
    let new_desc = 20 * n_desc;
    content[new_desc..new_desc + 4].copy_from_slice(&((va + ilt_off) as u32).to_le_bytes());
    content[new_desc + 12..new_desc + 16].copy_from_slice(&((va + dll_off) as u32).to_le_bytes());
    content[new_desc + 16..new_desc + 20].copy_from_slice(&((va + iat_off) as u32).to_le_bytes());
    // the final descriptor stays zero: terminator
    let thunk = (va + hint_off) as u64;
    match pe.optional.format {
        PeFormat::Pe32 => {
            content[ilt_off..ilt_off + 4].copy_from_slice(&(thunk as u32).to_le_bytes());
            content[iat_off..iat_off + 4].copy_from_slice(&(thunk as u32).to_le_bytes());
        }
        PeFormat::Pe32Plus => {
            content[ilt_off..ilt_off + 8].copy_from_slice(&thunk.to_le_bytes());
            content[iat_off..iat_off + 8].copy_from_slice(&thunk.to_le_bytes());
        }
    }
    content[hint_off + 2..hint_off + 2 + function.len()].copy_from_slice(function.as_bytes());
    content[dll_off..dll_off + dll.len()].copy_from_slice(dll.as_bytes());

    let mut sp = Splicer::new(pe.bytes());
    sp.replace(
        pe.number_of_sections_offset(),
        2,
        ((pe.sections.len() + 1) as u16).to_le_bytes().to_vec(),
    );
    sp.replace(pe.size_of_image_offset(), 4, plan.size_of_image.to_le_bytes().to_vec());
    sp.replace(
        pe.section_header_offset(pe.sections.len()),
        40,
        section_header_bytes(
            *b".idata\0\0",
            data_len as u32,
            plan.va,
            plan.raw_size,
            plan.raw_ptr,
            0xC000_0040,
        ),
    );
    let mut dir = Vec::with_capacity(8);
    dir.extend_from_slice(&plan.va.to_le_bytes());
    dir.extend_from_slice(&((desc_len) as u32).to_le_bytes());
    sp.replace(pe.dir_offset(DIR_IMPORT), 8, dir);
    let mut blob = vec![0u8; plan.eof_pad + plan.raw_size as usize];
    blob[plan.eof_pad..plan.eof_pad + content.len()].copy_from_slice(&content);
    sp.insert(pe.bytes().len(), blob);
    let (bytes, edits) = sp.apply()?;
    Ok(MutationOutput {
        bytes,
        edits,
        action: MutationAction::AddImport { dll: dll.into(), function: function.into() },
    })
}

/// Executable sections with room for a 5-byte stub after their content,
/// both physically (raw slack) and virtually (inside the mapped pages).
fn entry_stub_hosts(pe: &PeFile) -> Vec<usize> {
    let len = pe.bytes().len() as u64;
    let salign = pe.optional.section_alignment as u64;
    if salign == 0 || !salign.is_power_of_two() {
        return Vec::new();
    }
    pe.sections
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            s.is_executable()
                && s.raw_size > 0
                && s.raw_end() <= len
                && s.virtual_size as u64 + 5 <= s.raw_size as u64
                && s.virtual_size as u64 + 5 <= align_up(s.virtual_size as u64, salign)
        })
        .map(|(i, _)| i)
        .collect()
}

/// Point the entry field at a fresh `jmp old_entry` stub. The stub lands in
/// an executable section's tail slack when one has room, in a new
/// executable section otherwise.
pub fn new_entry_point(pe: &PeFile, rng: &mut ChaCha8Rng) -> Result<MutationOutput, MutationError> {
    let old_entry = pe.optional.entry_point_rva;
    let hosts = entry_stub_hosts(pe);
    if !hosts.is_empty() {
        let index = hosts[rng.gen_range(0..hosts.len())];
        let s = &pe.sections[index];
        let stub_rva = s.virtual_address + s.virtual_size;
        let stub_at = s.raw_pointer as usize + s.virtual_size as usize;
        let rel = old_entry.wrapping_sub(stub_rva.wrapping_add(5));
        let mut stub = vec![0xE9u8];
        stub.extend_from_slice(&rel.to_le_bytes());
        let mut sp = Splicer::new(pe.bytes());
        sp.replace(stub_at, 5, stub);
        sp.replace(
            pe.section_header_offset(index) + 8,
            4,
            (s.virtual_size + 5).to_le_bytes().to_vec(),
        );
        sp.replace(pe.entry_point_offset(), 4, stub_rva.to_le_bytes().to_vec());
        let (bytes, edits) = sp.apply()?;
        return Ok(MutationOutput {
            bytes,
            edits,
            action: MutationAction::NewEntryPoint { stub_rva, old_entry_rva: old_entry },
        });
    }

    if !header_slot_available(pe) {
        return Err(MutationError::NoRoom);
    }
    let data_len = 64u32;
    let plan = plan_new_section(pe, data_len)?;
    let stub_rva = plan.va;
    let rel = old_entry.wrapping_sub(stub_rva.wrapping_add(5));
    let mut content = vec![0u8; data_len as usize];
    content[0] = 0xE9;
    content[1..5].copy_from_slice(&rel.to_le_bytes());
    rng.fill_bytes(&mut content[5..]);
    let name = *b".bind\0\0\0";
    let mut sp = Splicer::new(pe.bytes());
    sp.replace(
        pe.number_of_sections_offset(),
        2,
        ((pe.sections.len() + 1) as u16).to_le_bytes().to_vec(),
    );
    sp.replace(pe.size_of_image_offset(), 4, plan.size_of_image.to_le_bytes().to_vec());
    sp.replace(
        pe.section_header_offset(pe.sections.len()),
        40,
        section_header_bytes(name, data_len, plan.va, plan.raw_size, plan.raw_ptr, 0x6000_0020),
    );
    sp.replace(pe.entry_point_offset(), 4, stub_rva.to_le_bytes().to_vec());
    let mut blob = vec![0u8; plan.eof_pad + plan.raw_size as usize];
    blob[plan.eof_pad..plan.eof_pad + content.len()].copy_from_slice(&content);
    sp.insert(pe.bytes().len(), blob);
    let (bytes, edits) = sp.apply()?;
    Ok(MutationOutput {
        bytes,
        edits,
        action: MutationAction::NewEntryPoint { stub_rva, old_entry_rva: old_entry },
    })
}

/// Zero the optional-header checksum. No-op if it already is.
pub fn zero_checksum(pe: &PeFile) -> Result<MutationOutput, MutationError> {
    let action = MutationAction::ZeroChecksum;
    if pe.optional.checksum == 0 {
        return Ok(noop(pe, action));
    }
    let mut sp = Splicer::new(pe.bytes());
    sp.replace(pe.checksum_offset(), 4, vec![0u8; 4]);
    let (bytes, edits) = sp.apply()?;
    Ok(MutationOutput { bytes, edits, action })
}

/// Remove the authenticode certificate: zero its directory entry and cut
/// the certificate bytes out of the overlay. No-op on unsigned files.
pub fn strip_signature(pe: &PeFile) -> Result<MutationOutput, MutationError> {
    let action = MutationAction::StripSignature;
    let Some(dir) = pe.data_directory(DIR_SECURITY) else {
        return Ok(noop(pe, action));
    };
    if dir.rva == 0 || dir.size == 0 {
        return Ok(noop(pe, action));
    }
    let mut sp = Splicer::new(pe.bytes());
    sp.replace(pe.dir_offset(DIR_SECURITY), 8, vec![0u8; 8]);
    let at = dir.rva as usize; // the security slot stores a file offset
    let len = pe.bytes().len();
    if at >= pe.overlay_start() && at < len {
        let end = (at + dir.size as usize).min(len);
        sp.delete(at, end - at);
    }
    let (bytes, edits) = sp.apply()?;
    Ok(MutationOutput { bytes, edits, action })
}

/// File offsets and current values of every debug entry's raw-data pointer.
fn debug_raw_pointer_fields(pe: &PeFile) -> Vec<(usize, u32)> {
    let mut out = Vec::new();
    let Some(dir) = pe.data_directory(DIR_DEBUG) else { return out };
    if dir.rva == 0 || dir.size == 0 {
        return out;
    }
    let Ok(table_at) = rva_to_offset(pe, dir.rva) else { return out };
    let n = ((dir.size / 28) as usize).min(16);
    for i in 0..n {
        let at = table_at + 28 * i + 24;
        if let Some(slice) = pe.bytes().get(at..at + 4) {
            out.push((at, u32::from_le_bytes(slice.try_into().unwrap())));
        }
    }
    out
}

/// Spoil the debug directory: zero every entry's timestamp and overwrite
/// the payloads (PDB paths, GUIDs) with random bytes. No-op without one.
pub fn scramble_debug(pe: &PeFile, rng: &mut ChaCha8Rng) -> Result<MutationOutput, MutationError> {
    let action = MutationAction::ScrambleDebug;
    let Some(dir) = pe.data_directory(DIR_DEBUG) else {
        return Ok(noop(pe, action));
    };
    if dir.rva == 0 || dir.size == 0 {
        return Ok(noop(pe, action));
    }
    let Ok(table_at) = rva_to_offset(pe, dir.rva) else {
        return Ok(noop(pe, action));
    };
    let len = pe.bytes().len();
    let n = ((dir.size / 28) as usize).min(16);
    let table_end = table_at + 28 * n;
    if n == 0 || table_end > len {
        return Ok(noop(pe, action));
    }

    let mut sp = Splicer::new(pe.bytes());
    let mut touched = false;
    let mut claimed: Vec<(usize, usize)> = vec![(table_at, table_end)];
    for i in 0..n {
        let entry_at = table_at + 28 * i;
        let ts_at = entry_at + 4;
        let ts = u32::from_le_bytes(pe.bytes()[ts_at..ts_at + 4].try_into().unwrap());
        if ts != 0 {
            sp.replace(ts_at, 4, vec![0u8; 4]);
            touched = true;
        }
        let size_d = u32::from_le_bytes(pe.bytes()[entry_at + 16..entry_at + 20].try_into().unwrap());
        let addr = u32::from_le_bytes(pe.bytes()[entry_at + 20..entry_at + 24].try_into().unwrap());
        let ptr = u32::from_le_bytes(pe.bytes()[entry_at + 24..entry_at + 28].try_into().unwrap());
        let payload_at = if ptr != 0 && (ptr as usize) < len {
            Some(ptr as usize)
        } else {
            rva_to_offset(pe, addr).ok()
        };
        let Some(payload_at) = payload_at else { continue };
        let payload_end = payload_at
            .saturating_add((size_d as usize).min(1 << 20))
            .min(len);
        if payload_end <= payload_at {
            continue;
        }
        if claimed.iter().any(|&(s, e)| payload_at < e && payload_end > s) {
            continue;
        }
        claimed.push((payload_at, payload_end));
        let mut fill = vec![0u8; payload_end - payload_at];
        rng.fill_bytes(&mut fill);
        sp.replace(payload_at, fill.len(), fill);
        touched = true;
    }
    if !touched {
        return Ok(noop(pe, action));
    }
    let (bytes, edits) = sp.apply()?;
    Ok(MutationOutput { bytes, edits, action })
}

/// Whether `kind` would run on this file (possibly as a recorded no-op).
pub fn applicable(pe: &PeFile, kind: MutationKind) -> bool {
    match kind {
        MutationKind::RenameSection => !pe.sections.is_empty(),
        MutationKind::AddSection => header_slot_available(pe) && alignments_ok(pe),
        MutationKind::AppendToSection => !appendable_sections(pe).is_empty(),
        MutationKind::AppendOverlay => true,
        MutationKind::AddImport => {
            import_descriptor_count(pe).is_some()
                && header_slot_available(pe)
                && alignments_ok(pe)
                && pick_unused_import(pe, &mut rng_from_seed(0)).is_some()
        }
        MutationKind::NewEntryPoint => {
            !entry_stub_hosts(pe).is_empty()
                || (header_slot_available(pe) && alignments_ok(pe))
        }
        MutationKind::ZeroChecksum => true,
        MutationKind::StripSignature => true,
        MutationKind::ScrambleDebug => true,
    }
}

/// Run one modification with all its randomness derived from `seed`.
/// Parameter draws happen in a fixed order, so (file, kind, seed) fully
/// determines the output.
pub fn apply_seeded(
    pe: &PeFile,
    kind: MutationKind,
    seed: u64,
) -> Result<MutationOutput, MutationError> {
    let mut rng = rng_from_seed(seed);
    match kind {
        MutationKind::RenameSection => {
            if pe.sections.is_empty() {
                return Err(MutationError::NoSections);
            }
            let index = rng.gen_range(0..pe.sections.len());
            rename_section(pe, index, &mut rng)
        }
        MutationKind::AddSection => add_section(pe, &mut rng),
        MutationKind::AppendToSection => {
            let eligible = appendable_sections(pe);
            if eligible.is_empty() {
                return Err(MutationError::NoSlack);
            }
            let (index, slack, growable) = eligible[rng.gen_range(0..eligible.len())];
            let count = if growable {
                rng.gen_range(MIN_APPEND..=MAX_APPEND)
            } else {
                rng.gen_range(MIN_APPEND..=MAX_APPEND.min(slack))
            };
            append_to_section(pe, index, count, &mut rng)
        }
        MutationKind::AppendOverlay => {
            let count = rng.gen_range(MIN_APPEND..=MAX_APPEND);
            append_overlay(pe, count, &mut rng)
        }
        MutationKind::AddImport => add_import(pe, &mut rng),
        MutationKind::NewEntryPoint => new_entry_point(pe, &mut rng),
        MutationKind::ZeroChecksum => zero_checksum(pe),
        MutationKind::StripSignature => strip_signature(pe),
        MutationKind::ScrambleDebug => scramble_debug(pe, &mut rng),
    }
}

/// Everything needed to audit or replay one chain step.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct MutationRecord {
    pub action: MutationAction,
    pub seed: u64,
    pub pre_sha256: [u8; 32],
    pub post_sha256: [u8; 32],
    pub noop: bool,
    pub post_score: f64,
}

/// How a chain ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ChainStatus {
    /// The unmodified file was already scored benign; nothing to do.
    AlreadyEvading,
    /// First benign verdict came after this 1-based step.
    Evaded { step: u32 },
    /// Still detected after every step.
    Survived,
}

/// A finished chain: per-step records plus the verdict trajectory.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ChainResult {
    pub baseline_score: f64,
    pub status: ChainStatus,
    pub records: Vec<MutationRecord>,
}

/// Chain failure: parsing, mutating, or scoring broke mid-run.
#[derive(Debug)]
pub enum ChainError {
    Parse(ParseError),
    Mutation(MutationError),
    Detector(DetectorError),
}

impl core::fmt::Display for ChainError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ChainError::Parse(e) => write!(f, "chain parse failure: {e}"),
            ChainError::Mutation(e) => write!(f, "chain mutation failure: {e}"),
            ChainError::Detector(e) => write!(f, "chain detector failure: {e}"),
        }
    }
}

/// Mutate until the detector lets go or the budget runs out.
///
/// Per step, the applicable kinds are re-evaluated against the current
/// file, one is drawn uniformly, and a fresh step seed drives all of its
/// parameter randomness. The draw order is fixed (kind index first, step
/// seed second), so replaying with the same master seed reproduces the
/// same files byte for byte.
pub fn apply_random_chain(
    bin: &RawBinary,
    detector: &DetectorHandle,
    max_steps: u32,
    master_seed: u64,
) -> Result<ChainResult, ChainError> {
    let baseline = detector.scan(bin.bytes()).map_err(ChainError::Detector)?;
    if baseline.decision == Decision::Benign {
        return Ok(ChainResult {
            baseline_score: baseline.score,
            status: ChainStatus::AlreadyEvading,
            records: Vec::new(),
        });
    }
    let mut chain_rng = rng_from_seed(master_seed);
    let mut current =
        RawBinary::new(bin.bytes().to_vec(), Label::Unknown, bin.origin()).expect("non-empty");
    let mut records = Vec::new();
    for step in 1..=max_steps {
        let pe = parse_pe(current).map_err(ChainError::Parse)?;
        let kinds: Vec<MutationKind> =
            ALL_KINDS.iter().copied().filter(|&k| applicable(&pe, k)).collect();
        if kinds.is_empty() {
            return Err(ChainError::Mutation(MutationError::AllActionsInapplicable));
        }
        let kind = kinds[chain_rng.gen_range(0..kinds.len())];
        let step_seed = chain_rng.gen::<u64>();
        let out = apply_seeded(&pe, kind, step_seed).map_err(ChainError::Mutation)?;
        debug_assert!(crate::edit::verify_edits(pe.bytes(), &out.bytes, &out.edits));
        let scan = detector.scan(&out.bytes).map_err(ChainError::Detector)?;
        records.push(MutationRecord {
            seed: step_seed,
            pre_sha256: *pe.raw().sha256(),
            post_sha256: sha256_digest(&out.bytes),
            noop: out.is_noop(),
            post_score: scan.score,
            action: out.action,
        });
        if scan.decision == Decision::Benign {
            return Ok(ChainResult {
                baseline_score: baseline.score,
                status: ChainStatus::Evaded { step },
                records,
            });
        }
        current = RawBinary::new(out.bytes, Label::Unknown, bin.origin()).expect("non-empty");
    }
    Ok(ChainResult {
        baseline_score: baseline.score,
        status: ChainStatus::Survived,
        records,
    })
}
