//! Tracker streaming over TCP using OpenIGTLink version-2 framing:
//! CRC-64 checked TRANSFORM and STATUS messages, a fan-out server with
//! latest-wins backpressure, and a reconnecting client.

pub mod client;
pub mod crc;
pub mod message;
pub mod server;

pub use client::{connect_tracker_client, connect_with, ClientConfig, ClientStatus, TrackerClient};
pub use crc::crc64;
pub use message::{
    decode_message, decode_prefix, encode_status, encode_transform, encode_transform_at, read_message, Matrix34,
    Message, MessageHeader, ProtocolError, StatusMessage, Timestamp, TransformMessage, UnknownMessage, IDENTITY,
};
pub use server::{DropOldestQueue, TrackerServer, DEFAULT_PORT, DEFAULT_QUEUE_CAPACITY};
