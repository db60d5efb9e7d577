//! Simulated control-system station: crates of boards on a tick clock, a
//! bus map with stable logical ids, drivers built from register read
//! programs, an event-triggered capture hook and the devices clients drive.

pub mod busmap;
pub mod device;
pub mod driver;
pub mod drivers;
pub mod frame;
pub mod hardware;
pub mod hook;
pub mod program;
pub mod propdb;
pub mod station;

pub use device::{DeviceError, DeviceName, EventName, Payload};
pub use frame::Frame;
pub use station::Station;
