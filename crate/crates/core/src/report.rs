// SPDX-License-Identifier: Apache-2.0

//! Text, JSON and DOT renderings of pipeline results.
//!
//! Every renderer iterates ordered maps only, so equal inputs give
//! byte-identical output. JSON shapes are described by the schemas in
//! `schemas/`.

use std::fmt::Write as _;

use serde_json::{json, Value as Json};

use crate::discovery::{CallTarget, Classification, DiscoveredFunction, DiscoveryState};
use crate::mem::{ImageKind, MemSegmentOff, Memory};
use crate::riscv::decode;
use crate::typeinf::{Recovery, Signature};

pub const INFO_SCHEMA: &str = include_str!("../schemas/info.schema.json");
pub const DISASM_SCHEMA: &str = include_str!("../schemas/disasm.schema.json");
pub const DISCOVER_SCHEMA: &str = include_str!("../schemas/discover.schema.json");
pub const TYPEINF_SCHEMA: &str = include_str!("../schemas/typeinf.schema.json");

fn kind_name(k: ImageKind) -> &'static str {
    match k {
        ImageKind::Executable => "executable",
        ImageKind::SharedObject => "shared-object",
        ImageKind::Relocatable => "relocatable",
        ImageKind::Synthetic => "synthetic",
    }
}

fn func_label(mem: &Memory, entry: MemSegmentOff, name: Option<&str>) -> String {
    name.map(str::to_string)
        .unwrap_or_else(|| format!("fn_{}", mem.display_segoff(entry)))
}

pub fn info_json(mem: &Memory) -> Json {
    let segments: Vec<Json> = mem
        .segments()
        .map(|(_, s)| {
            json!({
                "region": s.base(),
                "offset": s.offset().to_string(),
                "size": s.len(),
                "permissions": s.flags().to_string(),
            })
        })
        .collect();
    json!({
        "kind": kind_name(mem.kind()),
        "width": mem.width().bits(),
        "entry": mem.entry().map(|e| mem.display_segoff(e)),
        "segments": segments,
        "symbols": mem.symbols().len(),
        "opaque_relocations": mem.opaque_relocations().len(),
    })
}

pub fn info_text(mem: &Memory) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "kind: {}", kind_name(mem.kind()));
    let _ = writeln!(out, "width: {}", mem.width().bits());
    let entry = mem
        .entry()
        .map(|e| mem.display_segoff(e))
        .unwrap_or_else(|| "none".into());
    let _ = writeln!(out, "entry: {entry}");
    let _ = writeln!(out, "segments:");
    for (_, s) in mem.segments() {
        let end = s.offset().value().wrapping_add(s.len());
        let _ = writeln!(
            out,
            "  region {} {}-{:#x} {} ({} bytes)",
            s.base(),
            s.offset(),
            end,
            s.flags(),
            s.len()
        );
    }
    let _ = writeln!(out, "symbols: {}", mem.symbols().len());
    let _ = writeln!(out, "opaque relocations: {}", mem.opaque_relocations().len());
    out
}

/// One decoded word of a linear sweep over executable segments.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DisasmLine {
    pub address: String,
    /// `None` when the word is not plain bytes (a relocation or a short tail).
    pub word: Option<u32>,
    pub text: String,
}

pub fn disasm(mem: &Memory) -> Vec<DisasmLine> {
    let xlen = mem.width().bits();
    let mut lines = Vec::new();
    for (id, s) in mem.segments() {
        if !s.flags().execute {
            continue;
        }
        for off in (0..s.len()).step_by(4) {
            let at = MemSegmentOff {
                segment: id,
                offset: mem.word(off),
            };
            let word = if off + 4 <= s.len() {
                mem.read_le(at, 4).ok().map(|w| w as u32)
            } else {
                None
            };
            let text = match word {
                Some(w) => match decode(w, xlen) {
                    Ok(insn) => insn.to_string(),
                    Err(_) => "(illegal)".to_string(),
                },
                None => "(unreadable)".to_string(),
            };
            lines.push(DisasmLine {
                address: mem.display_segoff(at),
                word,
                text,
            });
        }
    }
    lines
}

pub fn disasm_text(lines: &[DisasmLine]) -> String {
    let mut out = String::new();
    for l in lines {
        let word = l.word.map(|w| format!("{w:08x}")).unwrap_or_else(|| "????????".into());
        let _ = writeln!(out, "{}: {word}  {}", l.address, l.text);
    }
    out
}

pub fn disasm_json(lines: &[DisasmLine]) -> Json {
    Json::Array(
        lines
            .iter()
            .map(|l| json!({"address": l.address, "word": l.word, "text": l.text}))
            .collect(),
    )
}

fn classification_json(mem: &Memory, c: &Classification) -> Json {
    let a = |x: &MemSegmentOff| mem.display_segoff(*x);
    let mut j = json!({ "kind": c.kind() });
    let o = j.as_object_mut().expect("object literal");
    match c {
        Classification::Branch { taken, fallthrough } => {
            o.insert("taken".into(), a(taken).into());
            o.insert("fallthrough".into(), a(fallthrough).into());
        }
        Classification::DirectJump(t) | Classification::TailCall(t) => {
            o.insert("target".into(), a(t).into());
        }
        Classification::Call { target, return_to } => {
            let t = match target {
                CallTarget::Direct(t) => a(t),
                CallTarget::Indirect => "indirect".into(),
            };
            o.insert("target".into(), t.into());
            o.insert("return_to".into(), a(return_to).into());
        }
        Classification::JumpTable(ts) => {
            o.insert("targets".into(), ts.iter().map(a).collect::<Vec<_>>().into());
        }
        Classification::SysCall { return_to } => {
            o.insert("return_to".into(), a(return_to).into());
        }
        Classification::Return => {}
        Classification::Unknown(why) => {
            o.insert("reason".into(), why.clone().into());
        }
    }
    j
}

/// One-line summary such as `call 0x1020 return 0x1010`.
pub fn classification_text(mem: &Memory, c: &Classification) -> String {
    let a = |x: &MemSegmentOff| mem.display_segoff(*x);
    match c {
        Classification::Branch { taken, fallthrough } => {
            format!("branch taken {} fallthrough {}", a(taken), a(fallthrough))
        }
        Classification::DirectJump(t) => format!("jump {}", a(t)),
        Classification::TailCall(t) => format!("tailcall {}", a(t)),
        Classification::Call { target, return_to } => {
            let t = match target {
                CallTarget::Direct(t) => a(t),
                CallTarget::Indirect => "indirect".into(),
            };
            format!("call {t} return {}", a(return_to))
        }
        Classification::JumpTable(ts) => {
            format!("jumptable {}", ts.iter().map(a).collect::<Vec<_>>().join(" "))
        }
        Classification::SysCall { return_to } => format!("syscall return {}", a(return_to)),
        Classification::Return => "return".into(),
        Classification::Unknown(why) => format!("unknown ({why})"),
    }
}

fn function_json(mem: &Memory, f: &DiscoveredFunction) -> Json {
    let blocks: Vec<Json> = f
        .blocks
        .iter()
        .map(|(addr, b)| {
            let listing: Vec<String> = b.block.to_string().lines().map(str::to_string).collect();
            json!({
                "address": mem.display_segoff(*addr),
                "size": b.block.byte_length.value(),
                "classification": classification_json(mem, &b.classification),
                "listing": listing,
            })
        })
        .collect();
    json!({
        "entry": mem.display_segoff(f.entry),
        "name": f.name,
        "callees": f.callees.iter().map(|c| mem.display_segoff(*c)).collect::<Vec<_>>(),
        "blocks": blocks,
    })
}

fn failures_json(st: &DiscoveryState) -> Json {
    Json::Array(
        st.failures
            .iter()
            .map(|(a, why)| json!({"address": a.to_string(), "reason": why}))
            .collect(),
    )
}

pub fn discover_json(mem: &Memory, st: &DiscoveryState) -> Json {
    json!({
        "functions": st.explored.values().map(|f| function_json(mem, f)).collect::<Vec<_>>(),
        "failures": failures_json(st),
    })
}

pub fn discover_text(mem: &Memory, st: &DiscoveryState) -> String {
    let mut out = String::new();
    for f in st.explored.values() {
        let _ = writeln!(
            out,
            "function {} {}",
            mem.display_segoff(f.entry),
            func_label(mem, f.entry, f.name.as_deref())
        );
        for (addr, b) in &f.blocks {
            let _ = writeln!(
                out,
                "  block {} size {}: {}",
                mem.display_segoff(*addr),
                b.block.byte_length.value(),
                classification_text(mem, &b.classification)
            );
            for line in b.block.to_string().lines() {
                let _ = writeln!(out, "    {line}");
            }
        }
    }
    for (a, why) in &st.failures {
        let _ = writeln!(out, "warning: {a}: {why}");
    }
    out
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// One `digraph` per function; nodes are blocks, edges carry their kind.
pub fn discover_dot(mem: &Memory, st: &DiscoveryState) -> String {
    let mut out = String::new();
    for f in st.explored.values() {
        let name = func_label(mem, f.entry, f.name.as_deref());
        let _ = writeln!(out, "digraph \"{}\" {{", dot_escape(&name));
        let _ = writeln!(out, "  node [shape=box, fontname=monospace];");
        for (addr, b) in &f.blocks {
            let id = mem.display_segoff(*addr);
            let label = format!("{id}\\l{}\\l", dot_escape(&classification_text(mem, &b.classification)));
            let _ = writeln!(out, "  \"{id}\" [label=\"{label}\"];");
        }
        for (addr, b) in &f.blocks {
            let id = mem.display_segoff(*addr);
            let edges: Vec<(MemSegmentOff, &str)> = match &b.classification {
                Classification::Branch { taken, fallthrough } => vec![(*taken, "taken"), (*fallthrough, "fallthrough")],
                Classification::DirectJump(t) => vec![(*t, "jump")],
                Classification::JumpTable(ts) => ts.iter().map(|t| (*t, "case")).collect(),
                Classification::Call { return_to, .. } => vec![(*return_to, "return")],
                Classification::SysCall { return_to } => vec![(*return_to, "syscall")],
                _ => Vec::new(),
            };
            for (t, label) in edges {
                let _ = writeln!(out, "  \"{id}\" -> \"{}\" [label=\"{label}\"];", mem.display_segoff(t));
            }
        }
        let _ = writeln!(out, "}}");
    }
    out
}

pub fn signature_json(mem: &Memory, s: &Signature) -> Json {
    json!({
        "entry": mem.display_segoff(s.entry),
        "name": s.name,
        "args": s.args.iter().map(|t| t.to_string()).collect::<Vec<_>>(),
        "rets": s.rets.iter().map(|t| t.to_string()).collect::<Vec<_>>(),
        "conflicts": s.conflicts,
    })
}

pub fn typeinf_json(mem: &Memory, r: &Recovery) -> Json {
    json!({
        "iterations": r.iterations,
        "feedback": r.feedback.iter().map(|e| mem.display_segoff(*e)).collect::<Vec<_>>(),
        "signatures": r.inference.signatures.values().map(|s| signature_json(mem, s)).collect::<Vec<_>>(),
        "failures": failures_json(&r.state),
    })
}

pub fn typeinf_text(mem: &Memory, r: &Recovery) -> String {
    let mut out = String::new();
    for s in r.inference.signatures.values() {
        let _ = writeln!(out, "{} {}", mem.display_segoff(s.entry), s.render(mem));
        for c in &s.conflicts {
            let _ = writeln!(out, "  conflict: {c}");
        }
    }
    let _ = writeln!(out, "iterations: {}", r.iterations);
    for e in &r.feedback {
        let _ = writeln!(out, "feedback entry: {}", mem.display_segoff(*e));
    }
    for (a, why) in &r.state.failures {
        let _ = writeln!(out, "warning: {a}: {why}");
    }
    out
}
