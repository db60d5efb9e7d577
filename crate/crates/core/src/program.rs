//! Read-programs: tiny stack-machine sequences a driver hands to the hook
//! engine when a channel is just a handful of register accesses.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hardware::{Access, HwError, RegisterMap, Width};

pub const MAX_PROGRAM_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum MicroOp {
    /// Push the register value.
    Read { offset: u32, width: Width },
    /// top &= mask
    And { mask: u32 },
    /// top >>= n
    Shr { n: u8 },
    /// Write a constant; the stack is untouched.
    Write { offset: u32, width: Width, value: u32 },
    /// Result is the stack top.
    End,
}

impl fmt::Display for MicroOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            MicroOp::Read { offset, width } => write!(f, "READ({offset:#04x},{})", width.bits()),
            MicroOp::And { mask } => write!(f, "AND({mask:#06x})"),
            MicroOp::Shr { n } => write!(f, "SHR({n})"),
            MicroOp::Write { offset, width, value } => write!(f, "WRITE({offset:#04x},{},{value})", width.bits()),
            MicroOp::End => f.write_str("END"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProgramError {
    #[error("program has {0} ops, limit is {MAX_PROGRAM_LEN}")]
    TooLong(usize),
    #[error("program has no END")]
    MissingEnd,
    #[error("END at op {0} is not the last op")]
    EndNotLast(usize),
    #[error("stack underflow at op {0}")]
    StackUnderflow(usize),
    #[error("stack depth {0} at END, expected 1")]
    BadFinalDepth(usize),
    #[error("op {index}: no register at offset {offset:#x}")]
    UnmappedOffset { index: usize, offset: u32 },
    #[error("op {index}: register at {offset:#x} is {actual}-bit")]
    WidthMismatch { index: usize, offset: u32, actual: u8 },
    #[error("op {index}: register at {offset:#x} is read-only")]
    ReadOnlyTarget { index: usize, offset: u32 },
    #[error("op {index}: constant {value:#x} does not fit {width} bits")]
    ConstantTooWide { index: usize, value: u32, width: u8 },
    #[error("op {index}: shift by {n} out of range")]
    ShiftTooLarge { index: usize, n: u8 },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExecError {
    #[error("malformed program: {0}")]
    Malformed(#[from] ProgramError),
    #[error(transparent)]
    Hardware(#[from] HwError),
    #[error("read routine failed: {0}")]
    Routine(String),
}

impl ExecError {
    pub fn code(&self) -> &'static str {
        match self {
            ExecError::Malformed(_) => "malformed",
            ExecError::Hardware(e) => e.code(),
            ExecError::Routine(_) => "routine-failed",
        }
    }
}

/// Register access relative to one board's I/O window.
pub trait BoardAccess {
    fn read(&mut self, offset: u32, width: Width) -> Result<u32, HwError>;
    fn write(&mut self, offset: u32, width: Width, value: u32) -> Result<(), HwError>;
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Program(Vec<MicroOp>);

impl Program {
    /// Builds a program, checking only its stack discipline.
    pub fn new(ops: Vec<MicroOp>) -> Result<Self, ProgramError> {
        let p = Program(ops);
        p.check_shape()?;
        Ok(p)
    }

    /// Wraps ops without any check; [`Program::exec`] still refuses malformed
    /// sequences at run time.
    pub fn from_ops_unchecked(ops: Vec<MicroOp>) -> Self {
        Program(ops)
    }

    pub fn single_read(offset: u32, width: Width) -> Self {
        Program(vec![MicroOp::Read { offset, width }, MicroOp::End])
    }

    pub fn masked_bit(offset: u32, width: Width, bit: u8) -> Self {
        Program(vec![
            MicroOp::Read { offset, width },
            MicroOp::And { mask: 1 << bit },
            MicroOp::Shr { n: bit },
            MicroOp::End,
        ])
    }

    pub fn ops(&self) -> &[MicroOp] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn check_shape(&self) -> Result<(), ProgramError> {
        if self.0.len() > MAX_PROGRAM_LEN {
            return Err(ProgramError::TooLong(self.0.len()));
        }
        let mut depth = 0usize;
        for (i, op) in self.0.iter().enumerate() {
            match *op {
                MicroOp::Read { .. } => depth += 1,
                MicroOp::And { .. } => {
                    if depth == 0 {
                        return Err(ProgramError::StackUnderflow(i));
                    }
                }
                MicroOp::Shr { n } => {
                    if depth == 0 {
                        return Err(ProgramError::StackUnderflow(i));
                    }
                    if n >= 32 {
                        return Err(ProgramError::ShiftTooLarge { index: i, n });
                    }
                }
                MicroOp::Write { .. } => {}
                MicroOp::End => {
                    if i + 1 != self.0.len() {
                        return Err(ProgramError::EndNotLast(i));
                    }
                    if depth != 1 {
                        return Err(ProgramError::BadFinalDepth(depth));
                    }
                    return Ok(());
                }
            }
        }
        Err(ProgramError::MissingEnd)
    }

    /// Full validation against the register map of the target board type.
    pub fn validate(&self, map: &RegisterMap) -> Result<(), ProgramError> {
        self.check_shape()?;
        for (index, op) in self.0.iter().enumerate() {
            let (offset, width) = match *op {
                MicroOp::Read { offset, width } => (offset, width),
                MicroOp::Write { offset, width, value } => {
                    if !width.fits(u64::from(value)) {
                        return Err(ProgramError::ConstantTooWide { index, value, width: width.bits() });
                    }
                    (offset, width)
                }
                _ => continue,
            };
            let def = map.get(offset).ok_or(ProgramError::UnmappedOffset { index, offset })?;
            if def.width != width {
                return Err(ProgramError::WidthMismatch { index, offset, actual: def.width.bits() });
            }
            if matches!(op, MicroOp::Write { .. }) && def.access == Access::ReadOnly {
                return Err(ProgramError::ReadOnlyTarget { index, offset });
            }
        }
        Ok(())
    }

    /// Interprets the program against live registers.
    pub fn exec(&self, io: &mut dyn BoardAccess) -> Result<u32, ExecError> {
        if self.0.len() > MAX_PROGRAM_LEN {
            return Err(ProgramError::TooLong(self.0.len()).into());
        }
        let mut stack = [0u32; MAX_PROGRAM_LEN];
        let mut depth = 0usize;
        for (i, op) in self.0.iter().enumerate() {
            match *op {
                MicroOp::Read { offset, width } => {
                    stack[depth] = io.read(offset, width)?;
                    depth += 1;
                }
                MicroOp::And { mask } => {
                    let top = depth.checked_sub(1).ok_or(ProgramError::StackUnderflow(i))?;
                    stack[top] &= mask;
                }
                MicroOp::Shr { n } => {
                    let top = depth.checked_sub(1).ok_or(ProgramError::StackUnderflow(i))?;
                    stack[top] = stack[top].checked_shr(u32::from(n)).ok_or(ProgramError::ShiftTooLarge { index: i, n })?;
                }
                MicroOp::Write { offset, width, value } => io.write(offset, width, value)?,
                MicroOp::End => {
                    if i + 1 != self.0.len() {
                        return Err(ProgramError::EndNotLast(i).into());
                    }
                    if depth != 1 {
                        return Err(ProgramError::BadFinalDepth(depth).into());
                    }
                    return Ok(stack[0]);
                }
            }
        }
        Err(ProgramError::MissingEnd.into())
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, op) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{op}")?;
        }
        f.write_str("]")
    }
}
