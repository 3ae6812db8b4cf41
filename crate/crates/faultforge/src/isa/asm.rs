//! Two-pass assembler and the matching disassembler.
//!
//! Syntax: one instruction per line, `label:` definitions, `.region name
//! base len [words...]` directives, `;` or `//` comments. Memory operands
//! are written `[rN, #off]`. `assemble(disassemble(p)) == p` holds for every
//! valid program.

use super::{Instruction, MemRegion, Opcode, Program, Reg};
use std::collections::BTreeMap;

#[derive(Debug, thiserror::Error)]
pub enum AsmError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: duplicate label `{label}`")]
    DuplicateLabel { line: usize, label: String },
    #[error("unknown label `{label}`")]
    UnknownLabel { line: usize, label: String },
    #[error("regions `{a}` and `{b}` overlap")]
    RegionOverlap { a: String, b: String },
    #[error("duplicate region name `{name}`")]
    DuplicateRegion { name: String },
    #[error("instruction {at}: {msg}")]
    BadInstruction { at: usize, msg: String },
    #[error("unsupported schema version {found}")]
    Schema { found: u64 },
    #[error("malformed program JSON: {msg}")]
    Json { msg: String },
}

fn parse_num(tok: &str, line: usize) -> Result<i64, AsmError> {
    let (neg, t) = match tok.strip_prefix('-') {
        Some(t) => (true, t),
        None => (false, tok),
    };
    let v = if let Some(h) = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        u32::from_str_radix(h, 16).map(|v| v as i64)
    } else {
        t.parse::<i64>()
    }
    .map_err(|_| AsmError::Parse { line, msg: format!("bad number `{tok}`") })?;
    Ok(if neg { -v } else { v })
}

fn parse_imm(tok: &str, line: usize) -> Result<i32, AsmError> {
    let t = tok
        .strip_prefix('#')
        .ok_or_else(|| AsmError::Parse { line, msg: format!("expected immediate, got `{tok}`") })?;
    Ok(parse_num(t, line)? as i32)
}

fn parse_reg(tok: &str, line: usize) -> Result<Reg, AsmError> {
    tok.parse().map_err(|msg| AsmError::Parse { line, msg })
}

fn is_imm(tok: &str) -> bool {
    tok.starts_with('#')
}

/// Assembles source text into a validated program.
pub fn assemble(text: &str) -> Result<Program, AsmError> {
    let mut instructions = Vec::new();
    let mut labels: BTreeMap<String, usize> = BTreeMap::new();
    let mut regions = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let mut s = raw;
        if let Some(p) = s.find(';') {
            s = &s[..p];
        }
        if let Some(p) = s.find("//") {
            s = &s[..p];
        }
        let mut s = s.trim();
        if s.is_empty() {
            continue;
        }

        if let Some(rest) = s.strip_prefix(".region") {
            let toks: Vec<&str> = rest.split_whitespace().collect();
            if toks.len() < 3 {
                return Err(AsmError::Parse { line, msg: ".region needs name, base, len".into() });
            }
            let base = parse_num(toks[1], line)? as u32;
            let len = parse_num(toks[2], line)? as u32;
            if len == 0 {
                return Err(AsmError::Parse { line, msg: "region length must be positive".into() });
            }
            let mut init: Vec<u32> = Vec::with_capacity(len as usize);
            for t in &toks[3..] {
                init.push(parse_num(t, line)? as u32);
            }
            if init.len() > len as usize {
                return Err(AsmError::Parse { line, msg: "more init words than region length".into() });
            }
            init.resize(len as usize, 0);
            regions.push(MemRegion { name: toks[0].to_string(), base, len, init });
            continue;
        }

        // Labels, possibly followed by an instruction on the same line.
        while let Some(colon) = s.find(':') {
            let (name, rest) = s.split_at(colon);
            let name = name.trim();
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                break;
            }
            if labels.insert(name.to_string(), instructions.len()).is_some() {
                return Err(AsmError::DuplicateLabel { line, label: name.to_string() });
            }
            s = rest[1..].trim();
        }
        if s.is_empty() {
            continue;
        }

        instructions.push(parse_instruction(s, line)?);
    }

    Program::from_parts(instructions, labels, regions)
}

fn parse_instruction(s: &str, line: usize) -> Result<Instruction, AsmError> {
    // Brackets in memory operands are cosmetic: `ldr r0, [r1, #2]`
    // tokenizes the same as `ldr r0, r1, #2`.
    let cleaned: String = s.replace(['[', ']', ','], " ");
    let toks: Vec<&str> = cleaned.split_whitespace().collect();
    let mnem = toks[0].to_ascii_lowercase();
    let ops = &toks[1..];
    let err = |msg: &str| AsmError::Parse { line, msg: format!("{mnem}: {msg}") };

    let want = |n: usize| -> Result<(), AsmError> {
        if ops.len() == n {
            Ok(())
        } else {
            Err(AsmError::Parse {
                line,
                msg: format!("{mnem}: expected {n} operand(s), got {}", ops.len()),
            })
        }
    };

    let insn = match mnem.as_str() {
        "nop" => {
            want(0)?;
            Instruction::nop()
        }
        "halt" => {
            want(0)?;
            Instruction::halt()
        }
        "mov" => {
            want(2)?;
            let d = parse_reg(ops[0], line)?;
            if is_imm(ops[1]) {
                Instruction::movi(d, parse_imm(ops[1], line)?)
            } else {
                Instruction::mov(d, parse_reg(ops[1], line)?)
            }
        }
        "add" | "sub" | "and" | "orr" | "eor" => {
            want(3)?;
            let d = parse_reg(ops[0], line)?;
            let a = parse_reg(ops[1], line)?;
            if is_imm(ops[2]) {
                let imm = parse_imm(ops[2], line)?;
                match mnem.as_str() {
                    "add" => Instruction::addi(d, a, imm),
                    "sub" => Instruction::subi(d, a, imm),
                    _ => return Err(err("immediate form not available")),
                }
            } else {
                let b = parse_reg(ops[2], line)?;
                let op = match mnem.as_str() {
                    "add" => Opcode::Add,
                    "sub" => Opcode::Sub,
                    "and" => Opcode::And,
                    "orr" => Opcode::Orr,
                    _ => Opcode::Eor,
                };
                Instruction::alu(op, d, a, b)
            }
        }
        "lsl" | "lsr" => {
            want(3)?;
            let d = parse_reg(ops[0], line)?;
            let a = parse_reg(ops[1], line)?;
            if !is_imm(ops[2]) {
                return Err(err("shift amount must be an immediate"));
            }
            let imm = parse_imm(ops[2], line)?;
            let op = if mnem == "lsl" { Opcode::Lsl } else { Opcode::Lsr };
            let mut i = Instruction::addi(d, a, imm);
            i.op = op;
            i
        }
        "cmp" => {
            want(2)?;
            let a = parse_reg(ops[0], line)?;
            if is_imm(ops[1]) {
                Instruction::cmpi(a, parse_imm(ops[1], line)?)
            } else {
                Instruction::cmp(a, parse_reg(ops[1], line)?)
            }
        }
        "ldr" => {
            if ops.len() == 2 {
                Instruction::ldr(parse_reg(ops[0], line)?, parse_reg(ops[1], line)?, 0)
            } else {
                want(3)?;
                Instruction::ldr(
                    parse_reg(ops[0], line)?,
                    parse_reg(ops[1], line)?,
                    parse_imm(ops[2], line)?,
                )
            }
        }
        "str" => {
            if ops.len() == 2 {
                Instruction::store(parse_reg(ops[0], line)?, parse_reg(ops[1], line)?, 0)
            } else {
                want(3)?;
                Instruction::store(
                    parse_reg(ops[0], line)?,
                    parse_reg(ops[1], line)?,
                    parse_imm(ops[2], line)?,
                )
            }
        }
        "b" | "beq" | "bne" | "blt" | "bge" => {
            want(1)?;
            let op = match mnem.as_str() {
                "b" => Opcode::B,
                "beq" => Opcode::Beq,
                "bne" => Opcode::Bne,
                "blt" => Opcode::Blt,
                _ => Opcode::Bge,
            };
            Instruction::branch(op, ops[0])
        }
        _ => return Err(AsmError::Parse { line, msg: format!("unknown mnemonic `{mnem}`") }),
    };
    Ok(insn)
}

/// Structural validation shared by the assembler and the JSON loader.
pub(super) fn validate(p: &Program) -> Result<(), AsmError> {
    let mut sorted: Vec<&MemRegion> = p.regions.iter().collect();
    sorted.sort_by_key(|r| r.base);
    for w in sorted.windows(2) {
        if w[0].base + w[0].len > w[1].base {
            return Err(AsmError::RegionOverlap { a: w[0].name.clone(), b: w[1].name.clone() });
        }
    }
    for (i, r) in p.regions.iter().enumerate() {
        if p.regions[..i].iter().any(|o| o.name == r.name) {
            return Err(AsmError::DuplicateRegion { name: r.name.clone() });
        }
    }
    for (n, &ix) in &p.labels {
        if ix > p.instructions.len() {
            return Err(AsmError::UnknownLabel { line: 0, label: n.clone() });
        }
    }
    for (at, insn) in p.instructions.iter().enumerate() {
        let bad = |msg: &str| AsmError::BadInstruction { at, msg: msg.to_string() };
        for r in insn
            .dest
            .iter()
            .chain(insn.src1.iter())
            .chain(insn.src2.iter())
        {
            if *r == super::PC {
                return Err(bad("r15 is the pc and cannot be an operand"));
            }
        }
        if insn.is_branch() {
            let l = insn.label.as_ref().ok_or_else(|| bad("branch without label"))?;
            if !p.labels.contains_key(l) {
                return Err(AsmError::UnknownLabel { line: 0, label: l.clone() });
            }
        } else if insn.label.is_some() {
            return Err(bad("label operand on a non-branch"));
        }
        if matches!(insn.op, Opcode::Lsl | Opcode::Lsr) {
            let s = insn.imm.ok_or_else(|| bad("shift needs an immediate"))?;
            if !(0..=31).contains(&s) {
                return Err(bad("shift amount out of range"));
            }
        }
        use Opcode::*;
        let arity_ok = match insn.op {
            Nop | Halt => insn.dest.is_none() && insn.src1.is_none() && insn.imm.is_none(),
            Movi => insn.dest.is_some() && insn.imm.is_some() && insn.src1.is_none(),
            Mov => insn.dest.is_some() && insn.src1.is_some() && insn.imm.is_none(),
            Add | Sub | And | Orr | Eor => {
                insn.dest.is_some() && insn.src1.is_some() && insn.src2.is_some()
            }
            Addi | Subi | Lsl | Lsr => {
                insn.dest.is_some() && insn.src1.is_some() && insn.imm.is_some()
            }
            Cmp => insn.src1.is_some() && insn.src2.is_some() && insn.dest.is_none(),
            Cmpi => insn.src1.is_some() && insn.imm.is_some() && insn.dest.is_none(),
            Ldr => insn.dest.is_some() && insn.src1.is_some() && insn.imm.is_some(),
            Str => insn.src1.is_some() && insn.src2.is_some() && insn.imm.is_some(),
            B | Beq | Bne | Blt | Bge => insn.label.is_some(),
        };
        if !arity_ok {
            return Err(bad("operand arity does not match opcode"));
        }
    }
    Ok(())
}

fn fmt_u32(v: u32) -> String {
    if v <= 4096 {
        v.to_string()
    } else {
        format!("0x{v:x}")
    }
}

fn fmt_imm(v: i32) -> String {
    if (-4096..=4096).contains(&v) {
        format!("#{v}")
    } else {
        format!("#0x{:x}", v as u32)
    }
}

/// Renders a program back to assembly text; a fixed point of `assemble`.
pub fn disassemble(p: &Program) -> String {
    let mut out = String::new();
    for r in &p.regions {
        out.push_str(&format!(".region {} {} {}", r.name, fmt_u32(r.base), fmt_u32(r.len)));
        for w in &r.init {
            out.push(' ');
            out.push_str(&fmt_u32(*w));
        }
        out.push('\n');
    }
    let mut by_index: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (name, &ix) in &p.labels {
        by_index.entry(ix).or_default().push(name);
    }
    for (i, insn) in p.instructions.iter().enumerate() {
        if let Some(names) = by_index.get(&i) {
            for n in names {
                out.push_str(n);
                out.push_str(":\n");
            }
        }
        out.push_str("        ");
        out.push_str(&render(insn));
        out.push('\n');
    }
    // Labels pointing one past the end (valid jump-to-end targets).
    if let Some(names) = by_index.get(&p.instructions.len()) {
        for n in names {
            out.push_str(n);
            out.push_str(":\n");
        }
    }
    out
}

fn render(insn: &Instruction) -> String {
    use Opcode::*;
    let m = insn.op.mnemonic();
    match insn.op {
        Nop | Halt => m.to_string(),
        Movi => format!("{m} {}, {}", insn.dest.unwrap(), fmt_imm(insn.imm.unwrap())),
        Mov => format!("{m} {}, {}", insn.dest.unwrap(), insn.src1.unwrap()),
        Add | Sub | And | Orr | Eor => format!(
            "{m} {}, {}, {}",
            insn.dest.unwrap(),
            insn.src1.unwrap(),
            insn.src2.unwrap()
        ),
        Addi | Subi | Lsl | Lsr => format!(
            "{m} {}, {}, {}",
            insn.dest.unwrap(),
            insn.src1.unwrap(),
            fmt_imm(insn.imm.unwrap())
        ),
        Cmp => format!("{m} {}, {}", insn.src1.unwrap(), insn.src2.unwrap()),
        Cmpi => format!("{m} {}, {}", insn.src1.unwrap(), fmt_imm(insn.imm.unwrap())),
        Ldr => format!(
            "{m} {}, [{}, {}]",
            insn.dest.unwrap(),
            insn.src1.unwrap(),
            fmt_imm(insn.imm.unwrap())
        ),
        Str => format!(
            "{m} {}, [{}, {}]",
            insn.src1.unwrap(),
            insn.src2.unwrap(),
            fmt_imm(insn.imm.unwrap())
        ),
        B | Beq | Bne | Blt | Bge => format!("{m} {}", insn.label.as_ref().unwrap()),
    }
}
