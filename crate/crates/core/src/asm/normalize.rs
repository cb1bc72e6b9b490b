//! x86_64 instruction normalization.
//!
//! Rules, applied per operand in this precedence order:
//!
//! | operand                                   | becomes |
//! |-------------------------------------------|---------|
//! | memory operand based on `rip`/`eip`       | `PTR`   |
//! | memory operand based on `rsp`/`esp`       | `SSP`   |
//! | memory operand based on `rbp`/`ebp`       | `SBP`   |
//! | any other memory operand                  | `MEM`   |
//! | direct target of a jump, call or loop     | `REL`   |
//! | immediate number                          | `NUM`   |
//! | `xmm`/`ymm`/`zmm` register                | `XMM`   |
//!
//! and every conditional-jump mnemonic becomes `cjmp`. Size qualifiers such
//! as `qword ptr` are kept, the bracketed expression (with any segment
//! override) is what gets replaced.

/// Tokens the normalizer emits. They are fixed points of every rule.
pub const PLACEHOLDERS: [&str; 7] = ["PTR", "SSP", "SBP", "MEM", "REL", "NUM", "XMM"];

const CONDITIONAL_JUMPS: &[&str] = &[
    "ja", "jae", "jb", "jbe", "jc", "je", "jne", "jg", "jge", "jl", "jle", "jo", "jno", "jp",
    "jnp", "js", "jns", "jz", "jnz", "jcxz", "jecxz", "jrcxz", "jna", "jnae", "jnb", "jnbe",
    "jnc", "jng", "jnge", "jnl", "jnle", "jpe", "jpo",
];

const DIRECT_BRANCHES: &[&str] = &[
    "jmp", "call", "loop", "loope", "loopne", "loopz", "loopnz", "xbegin", "cjmp",
];

const PREFIXES: &[&str] = &[
    "rep", "repe", "repz", "repne", "repnz", "lock", "bnd", "notrack", "data16", "addr32",
];

const SEGMENTS: &[&str] = &["cs", "ds", "es", "fs", "gs", "ss"];

pub fn is_conditional_jump(mnemonic: &str) -> bool {
    let m = mnemonic.to_ascii_lowercase();
    CONDITIONAL_JUMPS.contains(&m.as_str())
}

fn is_direct_branch(mnemonic: &str) -> bool {
    let m = mnemonic.to_ascii_lowercase();
    is_conditional_jump(&m) || DIRECT_BRANCHES.contains(&m.as_str())
}

fn numbered(s: &str, prefix: &str, max: u32) -> bool {
    match s.strip_prefix(prefix) {
        Some(d) if !d.is_empty() && (d == "0" || !d.starts_with('0')) => {
            d.parse::<u32>().is_ok_and(|n| n <= max)
        }
        _ => false,
    }
}

fn is_vector_register(reg: &str) -> bool {
    let r = reg.to_ascii_lowercase();
    ["xmm", "ymm", "zmm"].iter().any(|p| numbered(&r, p, 31))
}

fn is_register(word: &str) -> bool {
    const GP: &[&str] = &[
        "rax", "rbx", "rcx", "rdx", "rsi", "rdi", "rbp", "rsp", "eax", "ebx", "ecx", "edx",
        "esi", "edi", "ebp", "esp", "ax", "bx", "cx", "dx", "si", "di", "bp", "sp", "al", "bl",
        "cl", "dl", "ah", "bh", "ch", "dh", "sil", "dil", "bpl", "spl", "rip", "eip", "ip",
    ];
    let w = word.to_ascii_lowercase();
    if GP.contains(&w.as_str()) || SEGMENTS.contains(&w.as_str()) {
        return true;
    }
    if let Some(rest) = w.strip_prefix('r') {
        let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
        if let Ok(n) = digits.parse::<u32>() {
            let suffix = &rest[digits.len()..];
            if (8..=15).contains(&n) && ["", "d", "w", "b", "l"].contains(&suffix) {
                return true;
            }
        }
    }
    is_vector_register(&w)
        || numbered(&w, "mm", 7)
        || numbered(&w, "k", 7)
        || numbered(&w, "cr", 15)
        || numbered(&w, "dr", 15)
        || numbered(&w, "st", 7)
        || w == "st"
        || (w.starts_with("st(") && w.ends_with(')'))
}

fn is_immediate(op: &str) -> bool {
    let s = op.strip_prefix(['-', '+']).unwrap_or(op);
    if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        return !hex.is_empty() && hex.chars().all(|c| c.is_ascii_hexdigit());
    }
    if let Some(hex) = s.strip_suffix(['h', 'H']) {
        return !hex.is_empty()
            && hex.starts_with(|c: char| c.is_ascii_digit())
            && hex.chars().all(|c| c.is_ascii_hexdigit());
    }
    !s.is_empty() && s.chars().all(|c| c.is_ascii_digit())
}

fn words(s: &str) -> impl Iterator<Item = &str> {
    s.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .filter(|w| !w.is_empty())
}

fn memory_class(address_expr: &str) -> &'static str {
    let regs: Vec<String> = words(address_expr).map(|w| w.to_ascii_lowercase()).collect();
    let has = |names: &[&str]| regs.iter().any(|r| names.contains(&r.as_str()));
    if has(&["rip", "eip"]) {
        "PTR"
    } else if has(&["rsp", "esp"]) {
        "SSP"
    } else if has(&["rbp", "ebp"]) {
        "SBP"
    } else {
        "MEM"
    }
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Splits a segment override (`fs:`) off the end of `before`.
fn strip_segment(before: &str) -> &str {
    let trimmed = before.trim_end();
    if let Some(head) = trimmed.strip_suffix(':') {
        let seg_start = head.len().saturating_sub(2);
        if head.is_char_boundary(seg_start)
            && SEGMENTS.contains(&head[seg_start..].to_ascii_lowercase().as_str())
            && (seg_start == 0 || head[..seg_start].ends_with(char::is_whitespace))
        {
            return &head[..seg_start];
        }
    }
    before
}

fn replace_memory(op: &str) -> Option<String> {
    if let (Some(open), Some(close)) = (op.find('['), op.rfind(']')) {
        if open < close {
            let class = memory_class(&op[open + 1..close]);
            let before = strip_segment(&op[..open]);
            return Some(collapse_ws(&format!("{before} {class} {}", &op[close + 1..])));
        }
    }
    // `fs:0x28` style segment:offset without brackets.
    if let Some((seg, rest)) = op.rsplit_once(':') {
        let seg_word = seg.split_whitespace().last().unwrap_or("");
        if SEGMENTS.contains(&seg_word.to_ascii_lowercase().as_str())
            && !rest.trim().is_empty()
            && !is_register(rest.trim())
        {
            let before = &seg[..seg.len() - seg_word.len()];
            return Some(collapse_ws(&format!("{before} MEM")));
        }
    }
    None
}

fn normalize_operand(op: &str, branch: bool) -> String {
    let op = collapse_ws(op);
    if PLACEHOLDERS.contains(&op.as_str()) {
        return op;
    }
    if let Some(mem) = replace_memory(&op) {
        return mem;
    }
    let single_word = !op.contains(' ');
    if branch && single_word && !is_register(&op) {
        return "REL".into();
    }
    if is_immediate(&op) {
        return "NUM".into();
    }
    if is_vector_register(&op) {
        return "XMM".into();
    }
    op
}

/// Splits an operand list on commas that are not inside brackets or parens.
fn split_operands(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, c) in s.char_indices() {
        match c {
            '[' | '(' => depth += 1,
            ']' | ')' => depth -= 1,
            ',' if depth <= 0 => {
                out.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(&s[start..]);
    out.into_iter()
        .map(str::trim)
        .filter(|o| !o.is_empty())
        .collect()
}

fn strip_comment(text: &str) -> &str {
    let mut depth = 0i32;
    for (i, c) in text.char_indices() {
        match c {
            '[' => depth += 1,
            ']' => depth -= 1,
            ';' | '#' if depth <= 0 => return &text[..i],
            _ => {}
        }
    }
    text
}

/// Normalizes one instruction's text. Unknown mnemonics pass through; the
/// output is a fixed point (`normalize(normalize(x)) == normalize(x)`).
pub fn normalize_instruction(text: &str) -> String {
    let text = strip_comment(text).trim();
    let mut rest = text;
    let mut opcode: Vec<String> = Vec::new();
    loop {
        let (word, tail) = match rest.find(char::is_whitespace) {
            Some(i) => (&rest[..i], rest[i..].trim_start()),
            None => (rest, ""),
        };
        if word.is_empty() {
            break;
        }
        rest = tail;
        let is_prefix = PREFIXES.contains(&word.to_ascii_lowercase().as_str());
        opcode.push(word.to_string());
        if !is_prefix || rest.is_empty() {
            break;
        }
    }
    let Some(mnemonic) = opcode.last_mut() else {
        return String::new();
    };
    let branch = is_direct_branch(mnemonic);
    if is_conditional_jump(mnemonic) {
        *mnemonic = "cjmp".into();
    }
    let operands: Vec<String> = split_operands(rest)
        .into_iter()
        .map(|op| normalize_operand(op, branch))
        .collect();
    let head = opcode.join(" ");
    if operands.is_empty() {
        head
    } else {
        format!("{head} {}", operands.join(", "))
    }
}
