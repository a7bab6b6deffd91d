pub mod config;
pub mod network;
pub mod api;
pub mod demo;
