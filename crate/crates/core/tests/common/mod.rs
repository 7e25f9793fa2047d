//! Brute-force oracles written independently of the library's validators.
#![allow(dead_code)]

use srpl_core::tasks::{SampleMeta, TaskSample, TaskSpec, PAD, SEP};

/// Stack check over the three bracket kinds; returns the deepest stack seen.
pub fn brackets_balanced(s: &str) -> Option<usize> {
    let mut stack = Vec::new();
    let mut deepest = 0;
    for c in s.chars() {
        match c {
            '(' | '[' | '{' => {
                stack.push(c);
                deepest = deepest.max(stack.len());
            }
            ')' | ']' | '}' => {
                let open = stack.pop()?;
                let want = match c {
                    ')' => '(',
                    ']' => '[',
                    _ => '{',
                };
                if open != want {
                    return None;
                }
            }
            _ => return None,
        }
    }
    stack.is_empty().then_some(deepest)
}

/// Stack height after each character.
pub fn depth_trace(s: &str) -> Vec<usize> {
    let mut d = 0usize;
    s.chars()
        .map(|c| {
            if "([{".contains(c) {
                d += 1;
                d
            } else {
                let here = d;
                d -= 1;
                here
            }
        })
        .collect()
}

pub fn complement(c: char) -> char {
    match c {
        'A' => 'T',
        'T' => 'A',
        'C' => 'G',
        'G' => 'C',
        _ => panic!("not a base: {c}"),
    }
}

fn symbols(task: &TaskSpec, ids: &[usize]) -> Vec<String> {
    ids.iter().map(|&i| task.symbol(i).unwrap().to_string()).collect()
}

/// Checks one sample of any task against the brute-force oracles.
pub fn oracle_accepts(task: &TaskSpec, s: &TaskSample) -> bool {
    let n = s.input_tokens.len();
    if n == 0 || s.target_tokens.len() != n {
        return false;
    }
    let mut full = s.input_tokens.clone();
    full.push(*s.target_tokens.last().unwrap());
    let shift_ok = (0..n).all(|t| s.target_tokens[t] == PAD || s.target_tokens[t] == full[t + 1]);
    if !shift_ok {
        return false;
    }
    let syms = symbols(task, &full);
    match &s.metadata {
        SampleMeta::Dyck { max_depth, len } => {
            let text = syms.concat();
            text.len() == *len
                && s.target_tokens.iter().all(|&t| t != PAD)
                && brackets_balanced(&text) == Some(*max_depth)
                && *max_depth <= task.params.dyck_max_depth
        }
        SampleMeta::Bio { motif, noise_len, distance } => {
            let l = motif.len();
            if full.len() != 2 * l + noise_len + 1 || full[l + noise_len] != SEP || *distance != l + noise_len {
                return false;
            }
            let head: String = syms[..l].concat();
            let tail: Vec<char> = syms[l + noise_len + 1..].concat().chars().collect();
            let rc_ok = head.chars().enumerate().all(|(i, c)| tail[l - 1 - i] == complement(c));
            let mask_ok = (0..n).all(|t| (s.target_tokens[t] != PAD) == (t >= l + noise_len));
            head == *motif && rc_ok && mask_ok && (100..=200).contains(noise_len)
        }
        SampleMeta::Modulo { a, b, c, answer } => {
            let digits: Vec<u32> = [1usize, 3, 5].iter().map(|&i| syms[i].parse().unwrap()).collect();
            let r: u32 = syms[10].parse().unwrap();
            let mask_ok = (0..n).all(|t| (s.target_tokens[t] != PAD) == (t == n - 1));
            syms.len() == 11
                && digits == [*a, *b, *c]
                && (digits.iter().sum::<u32>()) % 7 == r
                && r == *answer
                && mask_ok
        }
    }
}
