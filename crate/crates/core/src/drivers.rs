//! Built-in drivers for the simulated board types.

use crate::driver::{AccessPlan, CallbackRef, ChannelDecl, Cost, DriverDescriptor, ValueKind};
use crate::hardware::{adc8, dio16, mot4, vct6, BoardType, Width};
use crate::program::{BoardAccess, MicroOp, Program};

fn simple(index: usize, name: impl Into<String>, kind: ValueKind, program: Program) -> ChannelDecl {
    ChannelDecl { index, name: name.into(), kind, cost: Cost::Simple, access: AccessPlan::Program(program) }
}

pub fn vct6() -> DriverDescriptor {
    let channels = (0..vct6::COUNTERS)
        .map(|n| simple(n, format!("count{n}"), ValueKind::Unsigned, Program::single_read((n as u32) * 4, Width::Bits32)))
        .collect();
    let ack = Program::new(vec![
        MicroOp::Write { offset: vct6::STATUS, width: Width::Bits32, value: 1 },
        MicroOp::Read { offset: vct6::STATUS, width: Width::Bits32 },
        MicroOp::End,
    ])
    .expect("ack program");
    DriverDescriptor {
        name: "vct6".into(),
        board_type: BoardType::Vct6,
        channels,
        commands: vec!["Read".into()],
        irq_ack: Some(ack),
    }
}

pub fn adc8() -> DriverDescriptor {
    let mut channels: Vec<_> = (0..adc8::CHANNELS)
        .map(|k| simple(k, format!("ch{k}"), ValueKind::Unsigned, Program::single_read(adc8::ch(k), Width::Bits16)))
        .collect();
    let averaged = CallbackRef::new("adc8/averaged", |io| {
        let mut sum = 0u32;
        for k in 0..adc8::CHANNELS {
            sum += io.read(adc8::ch(k), Width::Bits16)?;
        }
        Ok(sum / adc8::CHANNELS as u32)
    });
    channels.push(ChannelDecl {
        index: adc8::CHANNELS,
        name: "averaged".into(),
        kind: ValueKind::Unsigned,
        cost: Cost::Complex,
        access: AccessPlan::Callback(averaged),
    });
    DriverDescriptor { name: "adc8".into(), board_type: BoardType::Adc8, channels, commands: vec![], irq_ack: None }
}

pub fn mot4() -> DriverDescriptor {
    let channels = (0..mot4::AXES)
        .map(|n| simple(n, format!("pos{n}"), ValueKind::Signed, Program::single_read(mot4::pos(n), Width::Bits32)))
        .collect();
    DriverDescriptor {
        name: "mot4".into(),
        board_type: BoardType::Mot4,
        channels,
        commands: vec!["Move".into(), "Jog".into(), "ReadPos".into()],
        irq_ack: None,
    }
}

/// Channel 0 is the whole DATA word, channels 1..=16 its bits.
pub fn dio16() -> DriverDescriptor {
    let mut channels = vec![simple(0, "data", ValueKind::Unsigned, Program::single_read(dio16::DATA, Width::Bits16))];
    for bit in 0..16u8 {
        channels.push(simple(
            1 + bit as usize,
            format!("bit{bit}"),
            ValueKind::Unsigned,
            Program::masked_bit(dio16::DATA, Width::Bits16, bit),
        ));
    }
    DriverDescriptor {
        name: "dio16".into(),
        board_type: BoardType::Dio16,
        channels,
        commands: vec!["Write".into()],
        irq_ack: None,
    }
}

pub fn builtin() -> Vec<DriverDescriptor> {
    vec![vct6(), adc8(), mot4(), dio16()]
}

pub fn for_board(board_type: BoardType) -> DriverDescriptor {
    match board_type {
        BoardType::Vct6 => vct6(),
        BoardType::Adc8 => adc8(),
        BoardType::Mot4 => mot4(),
        BoardType::Dio16 => dio16(),
    }
}
