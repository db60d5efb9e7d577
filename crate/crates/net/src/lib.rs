//! Network side of the station: the device server speaking length-prefixed
//! JSON frames over TCP, the HTTP/WebSocket gateway, and an async client.

pub mod client;
pub mod codec;
pub mod gateway;
mod hub;
pub mod server;

pub use client::{Client, RemoteError};
pub use server::{ClockMode, ServerHandle, ServerOptions};
