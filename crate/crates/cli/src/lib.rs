//! Command line entry points and the HTTP service for trained models.

pub mod api;
pub mod cli;
pub mod service;
