#pragma once

#include "prefixvc/optim.hpp"

#include <map>
#include <string>

namespace prefixvc {

// Stage artifact on disk: named tensors plus a string-map of provenance
// (config fingerprint, seeds, upstream file checksums). Loading a stage
// verifies its recorded upstream checksums against the files on disk, so a
// retrained dependency invalidates everything built on top of it.

struct Checkpoint {
    std::string stage;
    std::map<std::string, std::string> meta;
    std::vector<std::pair<std::string, Tensor>> params;
};

void save_checkpoint(const std::string & path, const Checkpoint & c);
Checkpoint load_checkpoint(const std::string & path);

// FNV-1a over the raw bytes.
uint64_t file_checksum(const std::string & path);
uint64_t bytes_checksum(const void * data, size_t n, uint64_t h = 14695981039346656037ull);
std::string checksum_hex(uint64_t h);

// Hash of parameter values in collect order; detects any weight drift.
uint64_t params_checksum(const std::vector<Parameter *> & params);

void capture_params(Checkpoint & c, const std::vector<Parameter *> & params);
// Fills by name; a missing or extra name means the checkpoint was written by
// a different architecture.
void restore_params(const Checkpoint & c, const std::vector<Parameter *> & params);

} // namespace prefixvc
