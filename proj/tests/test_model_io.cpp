#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "crm/errors.hpp"
#include "crm/model_io.hpp"
#include "crm/pipeline.hpp"

using namespace crm;

namespace {

using Kind = PersistenceError::Kind;

Kind error_kind(const std::vector<std::uint8_t>& bytes) {
  try {
    deserialize_bundle(bytes);
  } catch (const PersistenceError& e) {
    return e.kind();
  }
  FAIL("bytes were accepted");
  return Kind::Io;
}

ModelBundle full_bundle(std::uint64_t seed) {
  Rng rng(seed);
  ModelBundle b;
  BackboneModel bb = init_backbone(InputKind::Text, 3, 2, 4, 1, rng);
  bb.vocab.terms = {"bad", "good", "film"};
  bb.vocab.idf = {1.5, 1.25, 1.0};
  bb.vocab.max_features = 3;
  bb.vocab.rebuild_index();
  bb.alpha = 1e-5;
  b.backbone = bb;
  RetrospectionModel rm = init_retrospection(2, 3, Fusion::Middle, 0.1, rng);
  rm.middle_pooling = MiddlePooling::Mean;
  b.retrospection = rm;
  GenerationModel gm;
  gm.head_W = bb.head_W;
  gm.backbone_fingerprint = backbone_fingerprint(bb);
  gm.normalize_injected = true;
  for (std::size_t c = 0; c < 2; ++c) gm.per_class.push_back(init_decomposition(c, 2, 4, 2, 3, 15.0, rng));
  b.generation = gm;
  return b;
}

}  // namespace

TEST_CASE("fnv1a64 reference values") {
  CHECK(fnv1a64({}) == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64({'a'}) == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a64({'f', 'o', 'o', 'b', 'a', 'r'}) == 0x85944171f73967e8ULL);
}

TEST_CASE("round trip is byte-identical and preserves every field") {
  const ModelBundle b = full_bundle(1);
  const auto bytes = serialize_bundle(b);
  const ModelBundle back = deserialize_bundle(bytes);
  CHECK(serialize_bundle(back) == bytes);
  REQUIRE(back.backbone);
  CHECK(back.backbone->vocab.terms == b.backbone->vocab.terms);
  CHECK(back.backbone->vocab.lookup("good") == 1);
  CHECK(back.backbone->encoder[0].weight == b.backbone->encoder[0].weight);
  REQUIRE(back.retrospection);
  CHECK(back.retrospection->fusion == Fusion::Middle);
  CHECK(back.retrospection->middle_pooling == MiddlePooling::Mean);
  CHECK(back.retrospection->attn_v == b.retrospection->attn_v);
  CHECK(back.retrospection->lambda == 0.1);
  REQUIRE(back.generation);
  CHECK(back.generation->normalize_injected);
  CHECK(back.generation->per_class[1].conv_Fg == b.generation->per_class[1].conv_Fg);

  const auto path = (std::filesystem::temp_directory_path() / "crm_test_model.crm").string();
  save_model(path, b);
  CHECK(serialize_bundle(load_model(path)) == bytes);
}

TEST_CASE("partial bundles") {
  ModelBundle only;
  only.backbone = full_bundle(2).backbone;
  const ModelBundle back = deserialize_bundle(serialize_bundle(only));
  CHECK(back.backbone);
  CHECK(!back.retrospection);
  CHECK(!back.generation);
}

TEST_CASE("corrupt files are rejected with distinct errors") {
  const auto bytes = serialize_bundle(full_bundle(3));
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK(error_kind(bad_magic) == Kind::BadMagic);
  auto bad_version = bytes;
  bad_version[4] = 99;
  CHECK(error_kind(bad_version) == Kind::BadVersion);
  for (std::size_t cut : {std::size_t{3}, std::size_t{5}, bytes.size() / 2, bytes.size() - 1}) {
    const std::vector<std::uint8_t> truncated(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    CHECK(error_kind(truncated) == (cut < 4 ? Kind::BadMagic : Kind::Truncated));
  }
  CHECK_THROWS_AS(load_model("/nonexistent/dir/model.crm"), PersistenceError);
}

TEST_CASE("huge declared lengths do not allocate") {
  auto bytes = serialize_bundle(full_bundle(4));
  // First section payload length sits after magic, version, name length and name.
  const std::size_t name_len = bytes[6] | (bytes[7] << 8);
  const std::size_t len_at = 8 + name_len;
  for (std::size_t k = 0; k < 8; ++k) bytes[len_at + k] = 0xff;
  CHECK(error_kind(bytes) == Kind::Truncated);
}

TEST_CASE("generation trained against another backbone is rejected") {
  ModelBundle b = full_bundle(5);
  b.backbone = full_bundle(6).backbone;
  CHECK(error_kind(serialize_bundle(b)) == Kind::FingerprintMismatch);
  try {
    check_generation_compatible(*b.generation, *b.backbone);
    FAIL("expected a mismatch");
  } catch (const PersistenceError& e) {
    CHECK(e.kind() == Kind::FingerprintMismatch);
  }
  const ModelBundle ok = full_bundle(5);
  CHECK_NOTHROW(check_generation_compatible(*ok.generation, *ok.backbone));
}

TEST_CASE("fingerprint tracks backbone bytes") {
  const ModelBundle a = full_bundle(7);
  BackboneModel changed = *a.backbone;
  CHECK(backbone_fingerprint(changed) == backbone_fingerprint(*a.backbone));
  changed.head_b[0] += 1e-12;
  CHECK(backbone_fingerprint(changed) != backbone_fingerprint(*a.backbone));
}
