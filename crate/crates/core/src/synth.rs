//! Deterministic construction of small, structurally valid PE images.
//!
//! Experiments need Windows executables that parse strictly, carry the
//! structures the modifications target (section slack, import tables, debug
//! directories, certificates, overlays), and can be regenerated bit-for-bit
//! from a seed. Real malware is neither shippable nor reproducible, so the
//! synthetic corpus stands in for it: benign and "malicious" files share
//! construction, and the malicious ones additionally carry a fixed byte
//! motif a toy detector can learn.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::RngCore;

use crate::pe::{align_up, compute_pe_checksum, PeFormat};
use crate::seed::{derive_seed, rng_from_seed};

/// The 6-byte motif planted in synthetic malicious files.
pub const MALICIOUS_MOTIF: [u8; 6] = [0xE5, 0x71, 0x1D, 0x0C, 0xA7, 0x59];

const E_LFANEW: usize = 0x40;
const FILE_ALIGN: u64 = 512;
const SECTION_ALIGN: u64 = 0x1000;

/// How section payload filler is drawn.
///
/// `Dialect(k)` assembles the payload from a fixed 64-token vocabulary
/// keyed by `k`, so files sharing a dialect share most of their n-grams
/// while different dialects share none. Corpora built from two dialects
/// are separable by content, not just by the planted motif.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Filler {
    /// Independent uniform bytes; every file's n-grams are private.
    Random,
    Dialect(u8),
}

/// Shape of one section in the built image.
#[derive(Debug, Clone)]
pub struct SectionSpec {
    pub name: [u8; 8],
    /// Bytes of actual content (virtual size).
    pub payload_len: u32,
    /// Guaranteed raw slack beyond the payload, before alignment rounding.
    pub extra_slack: u32,
    pub characteristics: u32,
}

/// Everything that determines the built image. Same spec, same bytes.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub format: PeFormat,
    pub sections: Vec<SectionSpec>,
    /// Unused bytes reserved between the section table and the first
    /// section's data, available for growing the table.
    pub header_slack: u32,
    pub with_imports: bool,
    pub with_debug: bool,
    pub with_signature: bool,
    pub overlay_len: u32,
    /// Distribution of section payload filler bytes.
    pub filler: Filler,
    /// Bytes planted at a seed-chosen offset in the last section's filler.
    pub embed: Option<Vec<u8>>,
    /// Write the real header checksum (otherwise leave the field zero).
    pub write_checksum: bool,
    pub seed: u64,
}

const TEXT_CHARACTERISTICS: u32 = 0x6000_0020;
const RDATA_CHARACTERISTICS: u32 = 0x4000_0040;
const DATA_CHARACTERISTICS: u32 = 0xC000_0040;

impl SynthSpec {
    /// One executable section, no optional structures.
    pub fn minimal(seed: u64) -> Self {
        SynthSpec {
            format: PeFormat::Pe32,
            sections: vec![SectionSpec {
                name: *b".text\0\0\0",
                payload_len: 512,
                extra_slack: 0,
                characteristics: TEXT_CHARACTERISTICS,
            }],
            header_slack: 0,
            with_imports: false,
            with_debug: false,
            with_signature: false,
            overlay_len: 0,
            filler: Filler::Random,
            embed: None,
            write_checksum: true,
            seed,
        }
    }

    /// Three sections plus every structure the modifications target.
    pub fn full(seed: u64) -> Self {
        SynthSpec {
            format: PeFormat::Pe32,
            sections: vec![
                SectionSpec {
                    name: *b".text\0\0\0",
                    payload_len: 1200,
                    extra_slack: 96,
                    characteristics: TEXT_CHARACTERISTICS,
                },
                SectionSpec {
                    name: *b".rdata\0\0",
                    payload_len: 900,
                    extra_slack: 64,
                    characteristics: RDATA_CHARACTERISTICS,
                },
                SectionSpec {
                    name: *b".data\0\0\0",
                    payload_len: 700,
                    extra_slack: 64,
                    characteristics: DATA_CHARACTERISTICS,
                },
            ],
            header_slack: 1024,
            with_imports: true,
            with_debug: true,
            with_signature: true,
            overlay_len: 256,
            filler: Filler::Random,
            embed: None,
            write_checksum: true,
            seed,
        }
    }

    /// A seed-driven variant for corpus generation: format, section count,
    /// sizes, and optional structures all vary.
    pub fn sampled(seed: u64) -> Self {
        let mut rng = rng_from_seed(seed ^ 0x5A5A_5A5A_5A5A_5A5A);
        let format = if rng.gen_bool(0.5) { PeFormat::Pe32 } else { PeFormat::Pe32Plus };
        let templates: [([u8; 8], u32); 3] = [
            (*b".text\0\0\0", TEXT_CHARACTERISTICS),
            (*b".rdata\0\0", RDATA_CHARACTERISTICS),
            (*b".data\0\0\0", DATA_CHARACTERISTICS),
        ];
        let nsect = rng.gen_range(1..=3usize);
        let sections = templates[..nsect]
            .iter()
            .map(|&(name, characteristics)| SectionSpec {
                name,
                payload_len: rng.gen_range(600..=2600),
                extra_slack: rng.gen_range(32..=384),
                characteristics,
            })
            .collect();
        SynthSpec {
            format,
            sections,
            header_slack: if rng.gen_bool(0.5) { 512 } else { 1024 },
            with_imports: true,
            with_debug: true,
            with_signature: rng.gen_bool(0.5),
            overlay_len: if rng.gen_bool(0.5) { rng.gen_range(64..=448) } else { 0 },
            filler: Filler::Random,
            embed: None,
            write_checksum: true,
            seed,
        }
    }
}

/// The built image plus the layout facts callers need back.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub bytes: Vec<u8>,
    pub entry_rva: u32,
    /// File offset where the embedded bytes landed, if any were requested.
    pub embed_at: Option<usize>,
}

fn import_block_len(format: PeFormat) -> usize {
    let t = match format {
        PeFormat::Pe32 => 4,
        PeFormat::Pe32Plus => 8,
    };
    // two descriptors, ILT, IAT, hint/name, dll name, rounded to 8
    align_up((40 + 4 * t + 14 + 13) as u64, 8) as usize
}

const DEBUG_BLOCK_LEN: usize = 28 + 32;

struct LaidSection {
    va: u64,
    vsize: u64,
    raw_ptr: u64,
    raw_size: u64,
}

fn put_u16(buf: &mut [u8], at: usize, v: u16) {
    buf[at..at + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_u32(buf: &mut [u8], at: usize, v: u32) {
    buf[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut [u8], at: usize, v: u64) {
    buf[at..at + 8].copy_from_slice(&v.to_le_bytes());
}

/// Build the image described by `spec`. Panics if the spec is degenerate
/// (no sections); all other inputs produce a strictly valid file.
pub fn build_pe(spec: &SynthSpec) -> SynthOutput {
    assert!(!spec.sections.is_empty(), "an image needs at least one section");
    let mut rng = rng_from_seed(spec.seed);

    let (opt_size, machine, image_base, coff_characteristics) = match spec.format {
        PeFormat::Pe32 => (224usize, 0x014Cu16, 0x0040_0000u64, 0x0102u16),
        PeFormat::Pe32Plus => (240, 0x8664, 0x1_4000_0000, 0x0022),
    };
    let nsect = spec.sections.len();
    let table_off = E_LFANEW + 4 + 20 + opt_size;
    let headers_end = table_off + 40 * nsect + spec.header_slack as usize;
    let size_of_headers = align_up(headers_end as u64, FILE_ALIGN);

    let host = nsect - 1;
    let import_len = if spec.with_imports { import_block_len(spec.format) } else { 0 };
    let debug_len = if spec.with_debug { DEBUG_BLOCK_LEN } else { 0 };
    let blocks_len = import_len + debug_len;
    let embed_len = spec.embed.as_ref().map_or(0, |e| e.len());

    let mut payloads: Vec<u64> = spec.sections.iter().map(|s| s.payload_len as u64).collect();
    payloads[host] = payloads[host].max((blocks_len + embed_len + 64) as u64);

    let mut laid = Vec::with_capacity(nsect);
    let mut va = SECTION_ALIGN;
    let mut raw_ptr = size_of_headers;
    for (i, s) in spec.sections.iter().enumerate() {
        let vsize = payloads[i];
        let raw_size = align_up(vsize + s.extra_slack as u64, FILE_ALIGN);
        laid.push(LaidSection { va, vsize, raw_ptr, raw_size });
        va = align_up(va + vsize, SECTION_ALIGN);
        raw_ptr += raw_size;
    }
    let size_of_image = va;
    let raw_end = raw_ptr;

    let cert_len: u64 = if spec.with_signature { 64 } else { 0 };
    let cert_off = align_up(raw_end + spec.overlay_len as u64, 8);
    let total_len = if spec.with_signature {
        cert_off + cert_len
    } else {
        raw_end + spec.overlay_len as u64
    };

    let host_va = laid[host].va;
    let host_raw = laid[host].raw_ptr;
    let import_dir = spec.with_imports.then(|| (host_va as u32, 40u32));
    let debug_dir = spec.with_debug.then(|| ((host_va as usize + import_len) as u32, 28u32));
    let security_dir = spec.with_signature.then(|| (cert_off as u32, cert_len as u32));

    let mut file = vec![0u8; total_len as usize];

    // DOS header
    file[0] = b'M';
    file[1] = b'Z';
    put_u32(&mut file, 0x3C, E_LFANEW as u32);

    // signature + COFF
    file[E_LFANEW..E_LFANEW + 4].copy_from_slice(b"PE\0\0");
    let coff = E_LFANEW + 4;
    put_u16(&mut file, coff, machine);
    put_u16(&mut file, coff + 2, nsect as u16);
    put_u32(&mut file, coff + 4, rng.gen::<u32>() | 1); // link timestamp
    put_u16(&mut file, coff + 16, opt_size as u16);
    put_u16(&mut file, coff + 18, coff_characteristics);

    // optional header
    let opt = coff + 20;
    let entry_rva = laid[0].va as u32;
    let size_of_code: u64 = spec
        .sections
        .iter()
        .zip(&laid)
        .filter(|(s, _)| s.characteristics & crate::pe::SECTION_EXECUTE != 0)
        .map(|(_, l)| l.raw_size)
        .sum();
    let size_of_data: u64 = spec
        .sections
        .iter()
        .zip(&laid)
        .filter(|(s, _)| s.characteristics & crate::pe::SECTION_EXECUTE == 0)
        .map(|(_, l)| l.raw_size)
        .sum();
    match spec.format {
        PeFormat::Pe32 => put_u16(&mut file, opt, 0x10B),
        PeFormat::Pe32Plus => put_u16(&mut file, opt, 0x20B),
    }
    file[opt + 2] = 14; // linker version
    put_u32(&mut file, opt + 4, size_of_code as u32);
    put_u32(&mut file, opt + 8, size_of_data as u32);
    put_u32(&mut file, opt + 16, entry_rva);
    put_u32(&mut file, opt + 20, laid[0].va as u32); // base of code
    match spec.format {
        PeFormat::Pe32 => {
            let data_base = laid.get(1).map_or(0, |l| l.va as u32);
            put_u32(&mut file, opt + 24, data_base);
            put_u32(&mut file, opt + 28, image_base as u32);
        }
        PeFormat::Pe32Plus => put_u64(&mut file, opt + 24, image_base),
    }
    put_u32(&mut file, opt + 32, SECTION_ALIGN as u32);
    put_u32(&mut file, opt + 36, FILE_ALIGN as u32);
    put_u16(&mut file, opt + 40, 6); // min os version
    put_u16(&mut file, opt + 48, 6); // min subsystem version
    put_u32(&mut file, opt + 56, size_of_image as u32);
    put_u32(&mut file, opt + 60, size_of_headers as u32);
    put_u16(&mut file, opt + 68, 3); // console subsystem
    put_u16(&mut file, opt + 70, 0x8140);
    match spec.format {
        PeFormat::Pe32 => {
            put_u32(&mut file, opt + 72, 0x10_0000); // stack reserve
            put_u32(&mut file, opt + 76, 0x1000);
            put_u32(&mut file, opt + 80, 0x10_0000); // heap reserve
            put_u32(&mut file, opt + 84, 0x1000);
            put_u32(&mut file, opt + 92, 16);
        }
        PeFormat::Pe32Plus => {
            put_u64(&mut file, opt + 72, 0x10_0000);
            put_u64(&mut file, opt + 80, 0x1000);
            put_u64(&mut file, opt + 88, 0x10_0000);
            put_u64(&mut file, opt + 96, 0x1000);
            put_u32(&mut file, opt + 108, 16);
        }
    }

    // data directories
    let dirs = opt + opt_size - 128;
    if let Some((rva, size)) = import_dir {
        put_u32(&mut file, dirs + 8 * crate::pe::DIR_IMPORT, rva);
        put_u32(&mut file, dirs + 8 * crate::pe::DIR_IMPORT + 4, size);
    }
    if let Some((off, size)) = security_dir {
        put_u32(&mut file, dirs + 8 * crate::pe::DIR_SECURITY, off);
        put_u32(&mut file, dirs + 8 * crate::pe::DIR_SECURITY + 4, size);
    }
    if let Some((rva, size)) = debug_dir {
        put_u32(&mut file, dirs + 8 * crate::pe::DIR_DEBUG, rva);
        put_u32(&mut file, dirs + 8 * crate::pe::DIR_DEBUG + 4, size);
    }

    // section table
    for (i, (s, l)) in spec.sections.iter().zip(&laid).enumerate() {
        let at = table_off + 40 * i;
        file[at..at + 8].copy_from_slice(&s.name);
        put_u32(&mut file, at + 8, l.vsize as u32);
        put_u32(&mut file, at + 12, l.va as u32);
        put_u32(&mut file, at + 16, l.raw_size as u32);
        put_u32(&mut file, at + 20, l.raw_ptr as u32);
        put_u32(&mut file, at + 36, s.characteristics);
    }

    // section contents: host blocks, then seed-driven filler
    let mut embed_at = None;
    for (i, l) in laid.iter().enumerate() {
        let start = l.raw_ptr as usize;
        let payload = l.vsize as usize;
        let mut cursor = start;
        if i == host {
            if spec.with_imports {
                let block = build_import_block(spec.format, host_va as u32);
                file[cursor..cursor + block.len()].copy_from_slice(&block);
                cursor += import_len;
            }
            if spec.with_debug {
                let block = build_debug_block(
                    (host_va as usize + import_len) as u32,
                    (host_raw as usize + import_len) as u32,
                    &mut rng,
                );
                file[cursor..cursor + block.len()].copy_from_slice(&block);
                cursor += debug_len;
            }
        }
        fill_payload(&mut file[cursor..start + payload], &mut rng, spec.filler);
        if i == host {
            if let Some(embed) = &spec.embed {
                let lo = start + blocks_len;
                let hi = start + payload - embed.len();
                let at = rng.gen_range(lo..=hi);
                file[at..at + embed.len()].copy_from_slice(embed);
                embed_at = Some(at);
            }
        }
    }

    if spec.overlay_len > 0 {
        let start = raw_end as usize;
        rng.fill_bytes(&mut file[start..start + spec.overlay_len as usize]);
    }

    if spec.with_signature {
        let at = cert_off as usize;
        put_u32(&mut file, at, cert_len as u32);
        put_u16(&mut file, at + 4, 0x0200); // revision
        put_u16(&mut file, at + 6, 0x0002); // PKCS#7-style entry
        rng.fill_bytes(&mut file[at + 8..at + cert_len as usize]);
    }

    if spec.write_checksum {
        let checksum = compute_pe_checksum(&file, opt + 64).unwrap();
        put_u32(&mut file, opt + 64, checksum);
    }

    SynthOutput { bytes: file, entry_rva, embed_at }
}

/// 64 eight-byte tokens fixed per dialect key; the vocabulary never
/// depends on the file seed, only the token order does.
fn dialect_pool(key: u8) -> [[u8; 8]; 64] {
    let mut prng = rng_from_seed(derive_seed(0x7fd0_c1a2_9e4b_0013, &[b"dialect", &[key]]));
    let mut pool = [[0u8; 8]; 64];
    for token in pool.iter_mut() {
        prng.fill_bytes(token);
    }
    pool
}

fn fill_payload(dest: &mut [u8], rng: &mut impl RngCore, filler: Filler) {
    match filler {
        Filler::Random => rng.fill_bytes(dest),
        Filler::Dialect(key) => {
            let pool = dialect_pool(key);
            let mut at = 0;
            while at < dest.len() {
                let token = &pool[(rng.next_u32() as usize) % pool.len()];
                let n = (dest.len() - at).min(token.len());
                dest[at..at + n].copy_from_slice(&token[..n]);
                at += n;
            }
        }
    }
}

fn build_import_block(format: PeFormat, base_rva: u32) -> Vec<u8> {
    let t = match format {
        PeFormat::Pe32 => 4usize,
        PeFormat::Pe32Plus => 8,
    };
    let ilt_off = 40;
    let iat_off = ilt_off + 2 * t;
    let hint_off = iat_off + 2 * t;
    let dll_off = hint_off + 14;
    let mut block = vec![0u8; import_block_len(format)];

    put_u32(&mut block, 0, base_rva + ilt_off as u32);
    put_u32(&mut block, 12, base_rva + dll_off as u32);
    put_u32(&mut block, 16, base_rva + iat_off as u32);
    // descriptor 1 stays zero: table terminator

    let thunk = base_rva as u64 + hint_off as u64;
    match format {
        PeFormat::Pe32 => {
            put_u32(&mut block, ilt_off, thunk as u32);
            put_u32(&mut block, iat_off, thunk as u32);
        }
        PeFormat::Pe32Plus => {
            put_u64(&mut block, ilt_off, thunk);
            put_u64(&mut block, iat_off, thunk);
        }
    }
    block[hint_off + 2..hint_off + 13].copy_from_slice(b"ExitProcess");
    block[dll_off..dll_off + 12].copy_from_slice(b"kernel32.dll");
    block
}

fn build_debug_block(rva: u32, file_off: u32, rng: &mut impl RngCore) -> Vec<u8> {
    let mut block = vec![0u8; DEBUG_BLOCK_LEN];
    put_u32(&mut block, 4, rng.gen::<u32>() | 1); // timestamp
    put_u32(&mut block, 12, 2); // codeview payload
    put_u32(&mut block, 16, 32); // payload length
    put_u32(&mut block, 20, rva + 28);
    put_u32(&mut block, 24, file_off + 28);
    rng.fill_bytes(&mut block[28..]);
    block
}
