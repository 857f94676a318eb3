pub mod admin;
pub mod bench;
pub mod cli;
pub mod clock;
pub mod config;
pub mod dispatcher;
pub mod error;
pub mod fault;
pub mod feed;
pub mod handler;
pub mod isc;
pub mod kernel;
pub mod mapek;
pub mod monitor;
pub mod registry;
pub mod scheduler;
pub mod servers;
pub mod service;
pub mod subprocess;
