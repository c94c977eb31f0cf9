#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cnerf/autodiff/adam.hpp"
#include "cnerf/autodiff/tape.hpp"
#include "json.hpp"

namespace cnerf {

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Container layout (all integers little endian):
///   "CNRF" | u32 version | u64 header length | header JSON
///   | u32 blob count | { u32 name length | name | u64 count | count x f64 } ...
///   | u32 CRC-32 of every preceding byte
struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;

    nlohmann::json header = nlohmann::json::object();
    std::vector<std::pair<std::string, std::vector<double>>> blobs;

    void add(const std::string& name, std::span<const double> values);
    /// nullptr when absent.
    const std::vector<double>* find(const std::string& name) const;
    /// Throws CheckpointError when absent or of the wrong length.
    const std::vector<double>& get(const std::string& name, std::size_t expected) const;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c);
/// Validates magic, version, lengths and checksum before returning anything.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::string& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::string& path);

/// Stores each parameter under prefix + name.
void add_parameters(Checkpoint& c, const std::string& prefix, const ad::ParameterList& params);
/// All-or-nothing: every blob is checked before any parameter is assigned.
void restore_parameters(const Checkpoint& c, const std::string& prefix, const ad::ParameterList& params);

/// Moments under prefix/m/<param>, prefix/v/<param>, step count and lr in the header.
void add_optimizer(Checkpoint& c, const std::string& prefix, const ad::Adam& opt);
void restore_optimizer(const Checkpoint& c, const std::string& prefix, ad::Adam& opt);

}  // namespace cnerf
