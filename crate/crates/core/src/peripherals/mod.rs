// SPDX-License-Identifier: Apache-2.0

//! Emulated peripherals and the framed link protocol they speak.

pub mod frame;
pub mod model;

pub use frame::{chunk, Frame, FrameError, FrameType, HandshakeMsg, Reassembler, FRAME_LEN, FRAME_PAYLOAD, HANDSHAKE_LEN};
pub use model::{
    dma_config_body, parse_dma_config, sensor_statement_body, AcceleratorSession, Binding, Peripheral,
    PeripheralError, PeripheralKind, PeripheralSpec, SensorStatement, FRAME_SLOT,
};
