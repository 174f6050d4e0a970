#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "crm/backbone.hpp"
#include "crm/generation.hpp"
#include "crm/retrospection.hpp"

namespace crm {

/// Model file layout (all integers and floats little-endian):
///   "CRM1" | u16 version | sections until end of file, each
///   u16 name length, name bytes, u64 payload length, payload.
/// Sections: "backbone", "retrospection", "generation". Matrices are written
/// as u64 rows, u64 cols, then row-major f64 values; vectors as u64 length
/// then values; strings as u32 length then bytes.
inline constexpr std::uint16_t kModelFormatVersion = 1;

class PersistenceError : public std::runtime_error {
 public:
  enum class Kind { Io, BadMagic, BadVersion, Truncated, Malformed, FingerprintMismatch };
  PersistenceError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct ModelBundle {
  std::optional<BackboneModel> backbone;
  std::optional<RetrospectionModel> retrospection;
  std::optional<GenerationModel> generation;
};

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(const std::vector<std::uint8_t>& bytes);

std::vector<std::uint8_t> serialize_backbone(const BackboneModel& m);
/// FNV-1a over the serialized backbone section payload.
std::uint64_t backbone_fingerprint(const BackboneModel& m);

std::vector<std::uint8_t> serialize_bundle(const ModelBundle& bundle);
/// Validates every length against the remaining bytes before allocating.
/// A generation section whose fingerprint disagrees with the bundled
/// backbone is rejected with Kind::FingerprintMismatch.
ModelBundle deserialize_bundle(const std::vector<std::uint8_t>& bytes);

/// Throws PersistenceError(FingerprintMismatch) unless `gm` was trained against `backbone`.
void check_generation_compatible(const GenerationModel& gm, const BackboneModel& backbone);

void save_model(const std::string& path, const ModelBundle& bundle);
ModelBundle load_model(const std::string& path);

}  // namespace crm
