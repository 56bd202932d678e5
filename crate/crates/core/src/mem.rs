// SPDX-License-Identifier: Apache-2.0

//! Region-based memory model for loaded binaries.
//!
//! A [`Memory`] is a set of [`MemSegment`]s. Each segment lives in a region
//! (region 0 holds absolute addresses, higher regions are relocatable) and is
//! backed by contiguous [`MemChunk`]s: raw bytes, relocation slots, or
//! zero-filled BSS. A [`MemSegmentOff`] is an address that has already been
//! validated to point into some segment.

use std::collections::BTreeMap;
use std::fmt;

use goblin::elf::{header, program_header, section_header, sym, Elf};
use thiserror::Error;

/// Bit width of machine words and addresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AddrWidth {
    W32,
    W64,
}

impl AddrWidth {
    pub fn bits(self) -> u32 {
        match self {
            AddrWidth::W32 => 32,
            AddrWidth::W64 => 64,
        }
    }

    pub fn bytes(self) -> u64 {
        u64::from(self.bits() / 8)
    }

    pub fn mask(self) -> u64 {
        match self {
            AddrWidth::W32 => 0xffff_ffff,
            AddrWidth::W64 => u64::MAX,
        }
    }

    pub fn from_bits(bits: u32) -> Option<AddrWidth> {
        match bits {
            32 => Some(AddrWidth::W32),
            64 => Some(AddrWidth::W64),
            _ => None,
        }
    }
}

/// A machine word, always normalized modulo `2^width`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MemWord {
    width: AddrWidth,
    value: u64,
}

impl MemWord {
    pub fn new(width: AddrWidth, value: u64) -> MemWord {
        MemWord {
            width,
            value: value & width.mask(),
        }
    }

    pub fn zero(width: AddrWidth) -> MemWord {
        MemWord { width, value: 0 }
    }

    pub fn width(self) -> AddrWidth {
        self.width
    }

    pub fn value(self) -> u64 {
        self.value
    }

    /// The value reinterpreted as a two's-complement signed integer.
    pub fn signed(self) -> i64 {
        match self.width {
            AddrWidth::W32 => self.value as u32 as i32 as i64,
            AddrWidth::W64 => self.value as i64,
        }
    }

    pub fn wrapping_add(self, rhs: MemWord) -> MemWord {
        assert_eq!(self.width, rhs.width, "MemWord width mismatch");
        MemWord::new(self.width, self.value.wrapping_add(rhs.value))
    }

    pub fn wrapping_sub(self, rhs: MemWord) -> MemWord {
        assert_eq!(self.width, rhs.width, "MemWord width mismatch");
        MemWord::new(self.width, self.value.wrapping_sub(rhs.value))
    }

    pub fn wrapping_mul(self, rhs: MemWord) -> MemWord {
        assert_eq!(self.width, rhs.width, "MemWord width mismatch");
        MemWord::new(self.width, self.value.wrapping_mul(rhs.value))
    }

    /// Adds a signed displacement modulo `2^width`.
    pub fn offset_by(self, delta: i64) -> MemWord {
        MemWord::new(self.width, self.value.wrapping_add(delta as u64))
    }
}

impl std::ops::Add for MemWord {
    type Output = MemWord;
    fn add(self, rhs: MemWord) -> MemWord {
        self.wrapping_add(rhs)
    }
}

impl std::ops::Sub for MemWord {
    type Output = MemWord;
    fn sub(self, rhs: MemWord) -> MemWord {
        self.wrapping_sub(rhs)
    }
}

impl std::ops::Mul for MemWord {
    type Output = MemWord;
    fn mul(self, rhs: MemWord) -> MemWord {
        self.wrapping_mul(rhs)
    }
}

impl fmt::Debug for MemWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}:{}", self.value, self.width.bits())
    }
}

impl fmt::Display for MemWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.value)
    }
}

/// Region index. Region 0 is the absolute address space.
pub type RegionIndex = u32;

/// An address as a (region, offset) pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MemAddr {
    pub base: RegionIndex,
    pub offset: MemWord,
}

impl MemAddr {
    pub fn absolute(offset: MemWord) -> MemAddr {
        MemAddr { base: 0, offset }
    }

    pub fn is_absolute(&self) -> bool {
        self.base == 0
    }
}

impl fmt::Display for MemAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.base == 0 {
            write!(f, "{}", self.offset)
        } else {
            write!(f, "segment{}+{}", self.base, self.offset)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Permissions {
    pub read: bool,
    pub write: bool,
    pub execute: bool,
}

impl Permissions {
    pub const R: Permissions = Permissions {
        read: true,
        write: false,
        execute: false,
    };
    pub const RW: Permissions = Permissions {
        read: true,
        write: true,
        execute: false,
    };
    pub const RX: Permissions = Permissions {
        read: true,
        write: false,
        execute: true,
    };

    pub fn any(&self) -> bool {
        self.read || self.write || self.execute
    }
}

impl fmt::Display for Permissions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flag = |set: bool, c: char| if set { c } else { '-' };
        write!(
            f,
            "{}{}{}",
            flag(self.read, 'r'),
            flag(self.write, 'w'),
            flag(self.execute, 'x')
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RelocationKind {
    SymbolRelative,
    RegionRelative,
}

/// A word whose contents are computed at load time.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Relocation {
    pub kind: RelocationKind,
    pub symbol: Option<u32>,
    pub addend: i64,
    /// Size in bytes: 4 or 8.
    pub size: u8,
    /// Raw ELF relocation type.
    pub r_type: u32,
}

/// A relocation that is kept for reference but not modeled as a chunk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpaqueRelocation {
    pub addr: MemAddr,
    pub r_type: u32,
    pub symbol: Option<u32>,
    pub addend: i64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MemChunk {
    Bytes(Vec<u8>),
    Relocation(Relocation),
    /// Zero-initialized region of the given length.
    Bss(u64),
}

impl MemChunk {
    pub fn len(&self) -> u64 {
        match self {
            MemChunk::Bytes(b) => b.len() as u64,
            MemChunk::Relocation(r) => u64::from(r.size),
            MemChunk::Bss(n) => *n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MemError {
    #[error("read of {len} bytes at segment offset {offset:#x} crosses the end of the segment")]
    OutOfBounds { offset: u64, len: u64 },
    #[error("read at segment offset {offset:#x} intersects a relocation")]
    RelocationRead { offset: u64 },
    #[error("empty memory chunk")]
    EmptyChunk,
    #[error("relocation of {size} bytes does not fit a {bits}-bit memory")]
    RelocationTooWide { size: u8, bits: u32 },
    #[error("segment has no permissions")]
    NoPermissions,
    #[error("segment width does not match memory width")]
    WidthMismatch,
    #[error("segments overlap in region {region} at {offset:#x}")]
    Overlap { region: RegionIndex, offset: u64 },
}

/// A contiguous mapped range within a single region.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemSegment {
    base: RegionIndex,
    offset: MemWord,
    flags: Permissions,
    contents: BTreeMap<u64, MemChunk>,
    len: u64,
}

impl MemSegment {
    /// Builds a segment from chunks laid out back to back.
    pub fn new(
        base: RegionIndex,
        offset: MemWord,
        flags: Permissions,
        chunks: Vec<MemChunk>,
    ) -> Result<MemSegment, MemError> {
        if !flags.any() {
            return Err(MemError::NoPermissions);
        }
        let mut contents = BTreeMap::new();
        let mut len = 0u64;
        for chunk in chunks {
            if chunk.is_empty() {
                return Err(MemError::EmptyChunk);
            }
            if let MemChunk::Relocation(r) = &chunk {
                if u64::from(r.size) > offset.width().bytes() {
                    return Err(MemError::RelocationTooWide {
                        size: r.size,
                        bits: offset.width().bits(),
                    });
                }
            }
            let n = chunk.len();
            contents.insert(len, chunk);
            len += n;
        }
        Ok(MemSegment {
            base,
            offset,
            flags,
            contents,
            len,
        })
    }

    pub fn base(&self) -> RegionIndex {
        self.base
    }

    pub fn offset(&self) -> MemWord {
        self.offset
    }

    pub fn flags(&self) -> Permissions {
        self.flags
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn chunks(&self) -> impl Iterator<Item = (u64, &MemChunk)> {
        self.contents.iter().map(|(k, v)| (*k, v))
    }

    fn contains_offset(&self, off: u64) -> bool {
        off < self.len
    }

    /// Reads `n` bytes starting at segment-relative offset `start`.
    pub fn read(&self, start: u64, n: u64) -> Result<Vec<u8>, MemError> {
        let end = start
            .checked_add(n)
            .filter(|e| *e <= self.len)
            .ok_or(MemError::OutOfBounds { offset: start, len: n })?;
        let mut out = Vec::with_capacity(n as usize);
        if n == 0 {
            return Ok(out);
        }
        // First chunk starting at or before `start`.
        let first = self.contents.range(..=start).next_back().map(|(k, _)| *k).unwrap_or(0);
        for (&key, chunk) in self.contents.range(first..end) {
            let chunk_end = key + chunk.len();
            let lo = start.max(key);
            let hi = end.min(chunk_end);
            if lo >= hi {
                continue;
            }
            match chunk {
                MemChunk::Bytes(b) => out.extend_from_slice(&b[(lo - key) as usize..(hi - key) as usize]),
                MemChunk::Bss(_) => out.resize(out.len() + (hi - lo) as usize, 0),
                MemChunk::Relocation(_) => return Err(MemError::RelocationRead { offset: lo }),
            }
        }
        Ok(out)
    }
}

/// Index of a segment within a [`Memory`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SegmentId(pub u32);

/// A validated address: a segment plus an in-bounds offset into it.
///
/// Only [`Memory`] hands these out, so `offset < segment.len()` holds for
/// every value that refers to that memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MemSegmentOff {
    pub segment: SegmentId,
    pub offset: MemWord,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Symbol {
    pub name: String,
    pub is_function: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageKind {
    Executable,
    SharedObject,
    Relocatable,
    Synthetic,
}

/// A loaded binary.
#[derive(Clone, Debug)]
pub struct Memory {
    width: AddrWidth,
    kind: ImageKind,
    segments: Vec<MemSegment>,
    entry: Option<MemSegmentOff>,
    symbols: BTreeMap<MemSegmentOff, Symbol>,
    opaque_relocations: Vec<OpaqueRelocation>,
}

impl Memory {
    /// Builds a memory from segments, ordering them by (region, offset).
    pub fn from_segments(width: AddrWidth, mut segments: Vec<MemSegment>) -> Result<Memory, MemError> {
        if segments.iter().any(|s| s.offset.width() != width) {
            return Err(MemError::WidthMismatch);
        }
        segments.sort_by_key(|s| (s.base, s.offset.value()));
        for pair in segments.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if a.base == b.base && u128::from(a.offset.value()) + u128::from(a.len) > u128::from(b.offset.value()) {
                return Err(MemError::Overlap {
                    region: b.base,
                    offset: b.offset.value(),
                });
            }
        }
        Ok(Memory {
            width,
            kind: ImageKind::Synthetic,
            segments,
            entry: None,
            symbols: BTreeMap::new(),
            opaque_relocations: Vec::new(),
        })
    }

    pub fn width(&self) -> AddrWidth {
        self.width
    }

    pub fn kind(&self) -> ImageKind {
        self.kind
    }

    pub fn segments(&self) -> impl Iterator<Item = (SegmentId, &MemSegment)> {
        self.segments.iter().enumerate().map(|(i, s)| (SegmentId(i as u32), s))
    }

    pub fn segment(&self, id: SegmentId) -> &MemSegment {
        &self.segments[id.0 as usize]
    }

    pub fn entry(&self) -> Option<MemSegmentOff> {
        self.entry
    }

    pub fn set_entry(&mut self, entry: Option<MemSegmentOff>) {
        self.entry = entry;
    }

    pub fn symbols(&self) -> &BTreeMap<MemSegmentOff, Symbol> {
        &self.symbols
    }

    pub fn symbol_at(&self, at: MemSegmentOff) -> Option<&Symbol> {
        self.symbols.get(&at)
    }

    /// Records a symbol. An existing function symbol at the same address wins.
    pub fn add_symbol(&mut self, at: MemSegmentOff, symbol: Symbol) {
        match self.symbols.get(&at) {
            Some(existing) if existing.is_function || !symbol.is_function => {}
            _ => {
                self.symbols.insert(at, symbol);
            }
        }
    }

    pub fn opaque_relocations(&self) -> &[OpaqueRelocation] {
        &self.opaque_relocations
    }

    pub fn word(&self, value: u64) -> MemWord {
        MemWord::new(self.width, value)
    }

    /// Finds the region-0 segment containing `addr`.
    pub fn resolve_absolute(&self, addr: u64) -> Option<MemSegmentOff> {
        if addr > self.width.mask() {
            return None;
        }
        self.resolve(MemAddr::absolute(self.word(addr)))
    }

    /// Finds the segment containing `addr` in its region.
    pub fn resolve(&self, addr: MemAddr) -> Option<MemSegmentOff> {
        let a = addr.offset.value();
        self.segments.iter().enumerate().find_map(|(i, s)| {
            if s.base != addr.base || a < s.offset.value() {
                return None;
            }
            let rel = a - s.offset.value();
            s.contains_offset(rel).then(|| MemSegmentOff {
                segment: SegmentId(i as u32),
                offset: self.word(rel),
            })
        })
    }

    pub fn segoff_to_addr(&self, at: MemSegmentOff) -> MemAddr {
        let seg = self.segment(at.segment);
        MemAddr {
            base: seg.base,
            offset: seg.offset + at.offset,
        }
    }

    /// The absolute address of `at`, when its segment is in region 0.
    pub fn absolute_address(&self, at: MemSegmentOff) -> Option<u64> {
        let addr = self.segoff_to_addr(at);
        addr.is_absolute().then_some(addr.offset.value())
    }

    /// Moves `at` by `delta` bytes within its region.
    pub fn segoff_offset(&self, at: MemSegmentOff, delta: i64) -> Option<MemSegmentOff> {
        let addr = self.segoff_to_addr(at);
        self.resolve(MemAddr {
            base: addr.base,
            offset: addr.offset.offset_by(delta),
        })
    }

    pub fn permissions(&self, at: MemSegmentOff) -> Permissions {
        self.segment(at.segment).flags
    }

    pub fn is_executable(&self, at: MemSegmentOff) -> bool {
        self.permissions(at).execute
    }

    pub fn read_bytes(&self, at: MemSegmentOff, n: u64) -> Result<Vec<u8>, MemError> {
        self.segment(at.segment).read(at.offset.value(), n)
    }

    /// Reads a little-endian unsigned integer of `size` bytes.
    pub fn read_le(&self, at: MemSegmentOff, size: u64) -> Result<u64, MemError> {
        let bytes = self.read_bytes(at, size)?;
        Ok(bytes.iter().rev().fold(0u64, |acc, b| (acc << 8) | u64::from(*b)))
    }

    /// The relocation whose chunk starts exactly at `at`, if any.
    pub fn read_relocation(&self, at: MemSegmentOff) -> Option<&Relocation> {
        match self.segment(at.segment).contents.get(&at.offset.value()) {
            Some(MemChunk::Relocation(r)) => Some(r),
            _ => None,
        }
    }

    pub fn display_segoff(&self, at: MemSegmentOff) -> String {
        self.segoff_to_addr(at).to_string()
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("malformed ELF: {0}")]
    Malformed(String),
    #[error("unsupported ELF class {0}")]
    UnsupportedClass(u8),
    #[error("unsupported byte order (only little-endian is supported)")]
    UnsupportedEndianness,
    #[error("unsupported machine {0} (expected RISC-V)")]
    UnsupportedMachine(u16),
    #[error("unsupported ELF type {0}")]
    UnsupportedType(u16),
    #[error("overlapping loadable segments in region {region} at {offset:#x}")]
    OverlappingSegments { region: RegionIndex, offset: u64 },
    #[error(transparent)]
    Memory(#[from] MemError),
}

#[derive(Clone, Debug)]
pub struct LoadOptions {
    /// Ingest `.symtab` and `.dynsym`.
    pub symbols: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { symbols: true }
    }
}

const EM_RISCV: u16 = 243;
const R_RISCV_32: u32 = 1;
const R_RISCV_64: u32 = 2;

struct PendingReloc {
    offset: u64,
    reloc: Relocation,
}

/// Loads a little-endian RISC-V ELF image.
pub fn load_elf(bytes: &[u8], opts: &LoadOptions) -> Result<Memory, LoadError> {
    if bytes.len() < header::SIZEOF_IDENT || &bytes[..4] != header::ELFMAG {
        return Err(LoadError::Malformed("missing ELF magic".into()));
    }
    let class = bytes[header::EI_CLASS];
    let width = match class {
        header::ELFCLASS32 => AddrWidth::W32,
        header::ELFCLASS64 => AddrWidth::W64,
        other => return Err(LoadError::UnsupportedClass(other)),
    };
    if bytes[header::EI_DATA] != header::ELFDATA2LSB {
        return Err(LoadError::UnsupportedEndianness);
    }
    let elf = Elf::parse(bytes).map_err(|e| LoadError::Malformed(e.to_string()))?;
    if elf.header.e_machine != EM_RISCV {
        return Err(LoadError::UnsupportedMachine(elf.header.e_machine));
    }
    let (kind, mut mem) = match elf.header.e_type {
        header::ET_EXEC => (ImageKind::Executable, load_program_segments(&elf, bytes, width, 0)?),
        header::ET_DYN => (ImageKind::SharedObject, load_program_segments(&elf, bytes, width, 1)?),
        header::ET_REL => (ImageKind::Relocatable, load_sections(&elf, bytes, width)?),
        other => return Err(LoadError::UnsupportedType(other)),
    };
    mem.kind = kind;

    if kind != ImageKind::Relocatable && elf.entry != 0 {
        let region = if kind == ImageKind::Executable { 0 } else { 1 };
        mem.entry = mem.resolve(MemAddr {
            base: region,
            offset: MemWord::new(width, elf.entry),
        });
    }

    if opts.symbols {
        let tables = [(&elf.syms, &elf.strtab), (&elf.dynsyms, &elf.dynstrtab)];
        for (syms, strtab) in tables {
            for s in syms.iter() {
                let st_type = s.st_type();
                if s.st_shndx == section_header::SHN_UNDEF as usize
                    || !matches!(st_type, sym::STT_FUNC | sym::STT_OBJECT | sym::STT_NOTYPE)
                {
                    continue;
                }
                let name = match strtab.get_at(s.st_name) {
                    Some(n) if !n.is_empty() && !n.starts_with(".L") && !n.starts_with('$') => n,
                    _ => continue,
                };
                if let Some(at) = symbol_location(&mem, &elf, kind, width, s.st_shndx, s.st_value) {
                    mem.add_symbol(
                        at,
                        Symbol {
                            name: name.to_string(),
                            is_function: st_type == sym::STT_FUNC,
                        },
                    );
                }
            }
        }
    }
    Ok(mem)
}

fn symbol_location(
    mem: &Memory,
    elf: &Elf<'_>,
    kind: ImageKind,
    width: AddrWidth,
    shndx: usize,
    value: u64,
) -> Option<MemSegmentOff> {
    match kind {
        ImageKind::Executable | ImageKind::Synthetic => mem.resolve_absolute(value),
        ImageKind::SharedObject => mem.resolve(MemAddr {
            base: 1,
            offset: MemWord::new(width, value),
        }),
        ImageKind::Relocatable => {
            let region = alloc_section_regions(elf).get(&shndx).copied()?;
            mem.resolve(MemAddr {
                base: region,
                offset: MemWord::new(width, value),
            })
        }
    }
}

fn file_range(bytes: &[u8], offset: u64, size: u64) -> Result<&[u8], LoadError> {
    let start = usize::try_from(offset).map_err(|_| LoadError::Malformed("offset overflow".into()))?;
    let len = usize::try_from(size).map_err(|_| LoadError::Malformed("size overflow".into()))?;
    start
        .checked_add(len)
        .and_then(|end| bytes.get(start..end))
        .ok_or_else(|| LoadError::Malformed(format!("range {offset:#x}+{size:#x} outside file")))
}

fn permissions_from_flags(p_flags: u32) -> Permissions {
    let flags = Permissions {
        read: p_flags & program_header::PF_R != 0,
        write: p_flags & program_header::PF_W != 0,
        execute: p_flags & program_header::PF_X != 0,
    };
    if flags.any() {
        flags
    } else {
        Permissions::R
    }
}

/// Splits file-backed bytes around relocation slots, then appends the BSS tail.
fn build_chunks(data: &[u8], mem_size: u64, mut relocs: Vec<PendingReloc>) -> Vec<MemChunk> {
    relocs.sort_by_key(|r| r.offset);
    let mut chunks = Vec::new();
    let mut pos = 0u64;
    for r in relocs {
        let size = u64::from(r.reloc.size);
        if r.offset < pos || r.offset + size > data.len() as u64 {
            continue;
        }
        if r.offset > pos {
            chunks.push(MemChunk::Bytes(data[pos as usize..r.offset as usize].to_vec()));
        }
        chunks.push(MemChunk::Relocation(r.reloc));
        pos = r.offset + size;
    }
    if (pos as usize) < data.len() {
        chunks.push(MemChunk::Bytes(data[pos as usize..].to_vec()));
    }
    if mem_size > data.len() as u64 {
        chunks.push(MemChunk::Bss(mem_size - data.len() as u64));
    }
    chunks
}

fn relocation_chunk(width: AddrWidth, r_type: u32, sym: usize, addend: i64) -> Option<Relocation> {
    let size = match r_type {
        R_RISCV_32 => 4u8,
        R_RISCV_64 => 8,
        _ => return None,
    };
    if u64::from(size) > width.bytes() {
        return None;
    }
    let symbol = (sym != 0).then_some(sym as u32);
    Some(Relocation {
        kind: if symbol.is_some() {
            RelocationKind::SymbolRelative
        } else {
            RelocationKind::RegionRelative
        },
        symbol,
        addend,
        size,
        r_type,
    })
}

fn load_program_segments(
    elf: &Elf<'_>,
    bytes: &[u8],
    width: AddrWidth,
    region: RegionIndex,
) -> Result<Memory, LoadError> {
    let loads: Vec<_> = elf
        .program_headers
        .iter()
        .filter(|ph| ph.p_type == program_header::PT_LOAD && ph.p_memsz > 0)
        .collect();
    if loads.iter().any(|ph| ph.p_filesz > ph.p_memsz) {
        return Err(LoadError::Malformed("p_filesz exceeds p_memsz".into()));
    }

    let all_relocs: Vec<(u64, u32, usize, i64)> = elf
        .dynrelas
        .iter()
        .chain(elf.dynrels.iter())
        .chain(elf.pltrelocs.iter())
        .map(|r| (r.r_offset, r.r_type, r.r_sym, r.r_addend.unwrap_or(0)))
        .collect();
    let mut opaque = Vec::new();
    let mut per_segment: Vec<Vec<PendingReloc>> = loads.iter().map(|_| Vec::new()).collect();
    for (offset, r_type, sym, addend) in all_relocs {
        let owner = loads
            .iter()
            .position(|ph| offset >= ph.p_vaddr && offset < ph.p_vaddr + ph.p_filesz);
        match (owner, relocation_chunk(width, r_type, sym, addend)) {
            (Some(i), Some(reloc)) => per_segment[i].push(PendingReloc {
                offset: offset - loads[i].p_vaddr,
                reloc,
            }),
            _ => opaque.push(OpaqueRelocation {
                addr: MemAddr {
                    base: region,
                    offset: MemWord::new(width, offset),
                },
                r_type,
                symbol: (sym != 0).then_some(sym as u32),
                addend,
            }),
        }
    }

    let mut segments = Vec::new();
    for (ph, relocs) in loads.iter().zip(per_segment) {
        if ph.p_vaddr > width.mask() || ph.p_memsz > width.mask() {
            return Err(LoadError::Malformed("segment address exceeds word width".into()));
        }
        let data = file_range(bytes, ph.p_offset, ph.p_filesz)?;
        let chunks = build_chunks(data, ph.p_memsz, relocs);
        segments.push(MemSegment::new(
            region,
            MemWord::new(width, ph.p_vaddr),
            permissions_from_flags(ph.p_flags),
            chunks,
        )?);
    }
    let mut mem = Memory::from_segments(width, segments).map_err(|e| match e {
        MemError::Overlap { region, offset } => LoadError::OverlappingSegments { region, offset },
        other => LoadError::Memory(other),
    })?;
    mem.opaque_relocations = opaque;
    Ok(mem)
}

/// Maps each allocated section of a relocatable object to its own region.
fn alloc_section_regions(elf: &Elf<'_>) -> BTreeMap<usize, RegionIndex> {
    let mut out = BTreeMap::new();
    let mut next = 1;
    for (i, sh) in elf.section_headers.iter().enumerate() {
        if sh.sh_flags & u64::from(section_header::SHF_ALLOC) != 0 && sh.sh_size > 0 {
            out.insert(i, next);
            next += 1;
        }
    }
    out
}

fn load_sections(elf: &Elf<'_>, bytes: &[u8], width: AddrWidth) -> Result<Memory, LoadError> {
    let regions = alloc_section_regions(elf);
    let mut opaque = Vec::new();
    let mut pending: BTreeMap<usize, Vec<PendingReloc>> = BTreeMap::new();
    for (target_idx, relocs) in elf.shdr_relocs.iter() {
        let Some(target) = elf.section_headers.get(*target_idx) else {
            continue;
        };
        let Some(&region) = regions.get(&(target.sh_info as usize)) else {
            continue;
        };
        for r in relocs.iter() {
            let addend = r.r_addend.unwrap_or(0);
            match relocation_chunk(width, r.r_type, r.r_sym, addend) {
                Some(reloc) => pending.entry(target.sh_info as usize).or_default().push(PendingReloc {
                    offset: r.r_offset,
                    reloc,
                }),
                None => opaque.push(OpaqueRelocation {
                    addr: MemAddr {
                        base: region,
                        offset: MemWord::new(width, r.r_offset),
                    },
                    r_type: r.r_type,
                    symbol: (r.r_sym != 0).then_some(r.r_sym as u32),
                    addend,
                }),
            }
        }
    }

    let mut segments = Vec::new();
    for (&idx, &region) in &regions {
        let sh = &elf.section_headers[idx];
        let flags = Permissions {
            read: true,
            write: sh.sh_flags & u64::from(section_header::SHF_WRITE) != 0,
            execute: sh.sh_flags & u64::from(section_header::SHF_EXECINSTR) != 0,
        };
        let data = if sh.sh_type == section_header::SHT_NOBITS {
            &[][..]
        } else {
            file_range(bytes, sh.sh_offset, sh.sh_size)?
        };
        let chunks = build_chunks(data, sh.sh_size, pending.remove(&idx).unwrap_or_default());
        segments.push(MemSegment::new(region, MemWord::zero(width), flags, chunks)?);
    }
    let mut mem = Memory::from_segments(width, segments)?;
    mem.opaque_relocations = opaque;
    Ok(mem)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Memory {
        let seg = MemSegment::new(
            0,
            MemWord::new(AddrWidth::W64, 0x10000),
            Permissions::RX,
            vec![
                MemChunk::Bytes((0..0x80u8).collect()),
                MemChunk::Relocation(Relocation {
                    kind: RelocationKind::RegionRelative,
                    symbol: None,
                    addend: 0,
                    size: 8,
                    r_type: R_RISCV_64,
                }),
                MemChunk::Bytes(vec![0xaa; 0x58]),
                MemChunk::Bss(0x20),
            ],
        )
        .unwrap();
        Memory::from_segments(AddrWidth::W64, vec![seg]).unwrap()
    }

    #[test]
    fn resolve_absolute_half_open() {
        let mem = sample();
        let so = mem.resolve_absolute(0x10040).unwrap();
        assert_eq!(so.offset.value(), 0x40);
        assert!(mem.resolve_absolute(0).is_none());
        assert_eq!(mem.resolve_absolute(0x100FF).unwrap().offset.value(), 0xFF);
        assert!(mem.resolve_absolute(0x10100).is_none());
    }

    #[test]
    fn read_inside_bytes() {
        let mem = sample();
        let so = mem.resolve_absolute(0x10004).unwrap();
        assert_eq!(mem.read_bytes(so, 4).unwrap(), vec![4, 5, 6, 7]);
    }

    #[test]
    fn read_into_bss_yields_zeros() {
        let mem = sample();
        let so = mem.resolve_absolute(0x100de).unwrap();
        assert_eq!(mem.read_bytes(so, 4).unwrap(), vec![0xaa, 0xaa, 0, 0]);
    }

    #[test]
    fn read_intersecting_relocation_fails() {
        let mem = sample();
        let so = mem.resolve_absolute(0x1007c).unwrap();
        assert_eq!(mem.read_bytes(so, 8), Err(MemError::RelocationRead { offset: 0x80 }));
        let reloc_at = mem.resolve_absolute(0x10080).unwrap();
        assert_eq!(mem.read_relocation(reloc_at).unwrap().size, 8);
    }

    #[test]
    fn read_past_end_fails() {
        let mem = sample();
        let so = mem.resolve_absolute(0x100fe).unwrap();
        assert!(matches!(mem.read_bytes(so, 4), Err(MemError::OutOfBounds { .. })));
    }

    #[test]
    fn segoff_to_addr_cases() {
        let mem = sample();
        let so = mem.resolve_absolute(0x10040).unwrap();
        assert_eq!(
            mem.segoff_to_addr(so),
            MemAddr::absolute(MemWord::new(AddrWidth::W64, 0x10040))
        );

        let reloc = MemSegment::new(
            1,
            MemWord::zero(AddrWidth::W64),
            Permissions::R,
            vec![MemChunk::Bss(0x10)],
        )
        .unwrap();
        let mem = Memory::from_segments(AddrWidth::W64, vec![reloc]).unwrap();
        let so = MemSegmentOff {
            segment: SegmentId(0),
            offset: mem.word(8),
        };
        assert_eq!(
            mem.segoff_to_addr(so),
            MemAddr {
                base: 1,
                offset: mem.word(8)
            }
        );

        let wrap = MemSegment::new(
            2,
            MemWord::new(AddrWidth::W32, 0xFFFF_FFFC),
            Permissions::R,
            vec![MemChunk::Bss(0x10)],
        )
        .unwrap();
        let mem = Memory::from_segments(AddrWidth::W32, vec![wrap]).unwrap();
        let so = MemSegmentOff {
            segment: SegmentId(0),
            offset: mem.word(8),
        };
        assert_eq!(mem.segoff_to_addr(so).offset.value(), 0x4);
    }

    #[test]
    fn overlapping_segments_rejected() {
        let w = AddrWidth::W64;
        let a = MemSegment::new(0, MemWord::new(w, 0x1000), Permissions::R, vec![MemChunk::Bss(0x100)]).unwrap();
        let b = MemSegment::new(0, MemWord::new(w, 0x10ff), Permissions::R, vec![MemChunk::Bss(0x10)]).unwrap();
        assert!(matches!(
            Memory::from_segments(w, vec![a.clone(), b]),
            Err(MemError::Overlap { .. })
        ));
        // Same range in another region is fine.
        let c = MemSegment::new(1, MemWord::new(w, 0x1000), Permissions::R, vec![MemChunk::Bss(0x100)]).unwrap();
        assert!(Memory::from_segments(w, vec![a, c]).is_ok());
    }

    #[test]
    fn chunk_invariants_enforced() {
        let w = AddrWidth::W32;
        assert_eq!(
            MemSegment::new(0, MemWord::zero(w), Permissions::R, vec![MemChunk::Bytes(vec![])]),
            Err(MemError::EmptyChunk)
        );
        assert_eq!(
            MemSegment::new(0, MemWord::zero(w), Permissions::default(), vec![MemChunk::Bss(1)]),
            Err(MemError::NoPermissions)
        );
        let wide = MemChunk::Relocation(Relocation {
            kind: RelocationKind::RegionRelative,
            symbol: None,
            addend: 0,
            size: 8,
            r_type: R_RISCV_64,
        });
        assert!(matches!(
            MemSegment::new(0, MemWord::zero(w), Permissions::R, vec![wide]),
            Err(MemError::RelocationTooWide { .. })
        ));
    }

    #[test]
    fn garbage_is_malformed() {
        assert!(matches!(
            load_elf(&[1, 2, 3, 4], &LoadOptions::default()),
            Err(LoadError::Malformed(_))
        ));
    }

    #[test]
    fn memword_normalizes() {
        let a = MemWord::new(AddrWidth::W32, 0x1_0000_0005);
        assert_eq!(a.value(), 5);
        let b = MemWord::new(AddrWidth::W32, 0xFFFF_FFFF);
        assert_eq!((a + b).value(), 4);
        assert_eq!(b.signed(), -1);
        assert_eq!((MemWord::zero(AddrWidth::W32) - a).value(), 0xFFFF_FFFB);
    }
}
