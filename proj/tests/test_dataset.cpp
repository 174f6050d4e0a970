#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <string>

#include "crm/dataset.hpp"
#include "crm/errors.hpp"

using namespace crm;

namespace {

const std::string kHeader = "id\tsplit\tkind\tparent_id\tlabel\ttext_a\ttext_b\n";

std::string two_rows() {
  return "#classes\tneg\tpos\n" + kHeader +
         "r1\ttrain\tfactual\t\t1\ta great film\t\n"
         "r1_cf\ttrain\tcounterfactual\tr1\t0\ta dull film\t\n";
}

// Runs the parser and returns its error text ("" when it accepted the input).
std::string parse_error(const std::string& text) {
  try {
    parse_dataset(text);
  } catch (const DataError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("two-row file with a linked counterfactual") {
  const Dataset ds = parse_dataset(two_rows());
  CHECK(ds.class_count() == 2);
  CHECK(ds.class_names[1] == "pos");
  REQUIRE(ds.samples.size() == 2);
  const Linkage link = link_pairs(ds);
  REQUIRE(link.by_factual.at("r1").size() == 1);
  CHECK(link.by_factual.at("r1")[0].target_class == 0);
  CHECK(link.by_factual.at("r1")[0].sample->text_a == "a dull film");
  CHECK(link.unlinked_factuals == 0);
}

TEST_CASE("class count inferred from labels without a #classes line") {
  const Dataset ds = parse_dataset(kHeader +
                                   "a\ttrain\tfactual\t\t0\tx\t\n"
                                   "b\ttrain\tfactual\t\t2\ty\t\n"
                                   "c\ttrain\tfactual\t\t1\tz\t\n");
  CHECK(ds.class_count() == 3);
}

TEST_CASE("CRLF input parses like LF") {
  std::string crlf;
  for (char ch : two_rows()) {
    if (ch == '\n') crlf += '\r';
    crlf += ch;
  }
  CHECK(serialize_dataset(parse_dataset(crlf)) == serialize_dataset(parse_dataset(two_rows())));
}

TEST_CASE("invariant violations name the line") {
  const std::string head = "#classes\tneg\tpos\n" + kHeader;
  CHECK(parse_error(head + "r1\ttrain\tfactual\t\t1\tx\t\nr1_cf\ttrain\tcounterfactual\tr1\t1\ty\t\n")
            .find("line 4") != std::string::npos);
  CHECK(parse_error(head + "r1\ttrain\tfactual\t\t1\tx\t\nr1\ttrain\tfactual\t\t0\ty\t\n").find("duplicate") !=
        std::string::npos);
  CHECK(parse_error(head + "r1\ttrain\tfactual\t\t1\tx\t\nq\ttrain\tcounterfactual\tnope\t0\ty\t\n")
            .find("dangling") != std::string::npos);
  CHECK(parse_error(head + "r1\ttrain\tfactual\t\t5\tx\t\n").find("line 3") != std::string::npos);
  CHECK(parse_error(head + "r1\ttrain\tfactual\t\t1\n").find("7 tab-separated") != std::string::npos);
  CHECK(parse_error(head + "r1\tholdout\tfactual\t\t1\tx\t\n") != "");
  CHECK(parse_error("r1\ttrain\tfactual\t\t1\tx\t\n").find("header") != std::string::npos);
  // A class that only appears outside train cannot be learned.
  CHECK(parse_error(head + "a\ttrain\tfactual\t\t0\tx\t\nb\ttest\tfactual\t\t1\ty\t\n").find("class 1") !=
        std::string::npos);
}

TEST_CASE("escaping round-trips tabs and newlines") {
  const std::string raw = "tab\there\nnew\\line\rcr";
  CHECK(escape_field(raw).find('\t') == std::string::npos);
  CHECK(unescape_field(escape_field(raw)) == raw);
  Dataset ds = parse_dataset(two_rows());
  ds.samples[0].text_a = raw;
  CHECK(parse_dataset(serialize_dataset(ds)).find(ds.samples[0].id)->text_a == raw);
}

TEST_CASE("latent values round-trip exactly") {
  const Vector v{0.1, -1.0 / 3.0, 1e-300, 12345.678901234567};
  CHECK(parse_latent(format_latent(v)) == v);
  CHECK_THROWS_AS(parse_latent("1.0 abc"), DataError);
}

TEST_CASE("pair task and link counts") {
  // Two counterfactuals per non-gold class.
  std::string text = "#classes\te\tn\tc\n#task\tpair\n" + kHeader + "p\ttrain\tfactual\t\t0\tprem\thyp\n";
  for (int c = 1; c <= 2; ++c)
    for (int k = 0; k < 2; ++k)
      text += "p_" + std::to_string(c) + std::to_string(k) + "\ttrain\tcounterfactual\tp\t" + std::to_string(c) +
              "\tprem\thyp" + std::to_string(k) + "\n";
  text += "q\ttrain\tfactual\t\t1\tx\ty\nr\ttrain\tfactual\t\t2\tx\ty\n";
  const Dataset ds = parse_dataset(text);
  CHECK(ds.task == TaskKind::Pair);
  const Linkage link = link_pairs(ds);
  CHECK(link.by_factual.at("p").size() == 4);
  CHECK(link.by_factual.at("q").empty());
  CHECK(link.unlinked_factuals == 2);
}

TEST_CASE("samples are ordered by split then id") {
  const Dataset ds = parse_dataset("#classes\ta\tb\n" + kHeader +
                                   "z\ttest\tfactual\t\t0\tx\t\n"
                                   "b\ttrain\tfactual\t\t1\tx\t\n"
                                   "a\ttrain\tfactual\t\t0\tx\t\n"
                                   "m\tval\tfactual\t\t0\tx\t\n");
  CHECK(ds.samples[0].id == "a");
  CHECK(ds.samples[1].id == "b");
  CHECK(ds.samples[2].id == "m");
  CHECK(ds.samples[3].id == "z");
  CHECK(ds.select(Split::Train, SampleKind::Factual).size() == 2);
  CHECK(ds.find("nope") == nullptr);
}

TEST_CASE("reflection across the bisector in two dimensions") {
  const double theta = 0.7;
  // Bisector of (1,0) and (-1,0) is the y-axis.
  const Vector a{1.0, 0.0}, b{-1.0, 0.0};
  const Vector x{std::cos(theta), std::sin(theta)};
  const Vector m = reflect_across_bisector(x, a, b);
  CHECK(m[0] == doctest::Approx(-std::cos(theta)).epsilon(1e-15));
  CHECK(m[1] == doctest::Approx(std::sin(theta)).epsilon(1e-15));
  const Vector mid = scaled(add(x, m), 0.5);
  CHECK(std::abs(mid[0]) < 1e-15);
  CHECK(mid[1] == doctest::Approx(std::sin(theta)).epsilon(1e-15));
}

TEST_CASE("synthetic mirror dataset") {
  SynthConfig cfg;
  cfg.seed = 4;
  cfg.n = 120;
  cfg.classes = 3;
  cfg.dim = 5;
  const SynthResult r = synth_mirror_dataset(cfg);
  const Dataset& ds = r.dataset;
  CHECK(ds.input == InputKind::Latent);
  CHECK(ds.select(Split::Train, SampleKind::Factual).size() + ds.select(Split::Val, SampleKind::Factual).size() +
            ds.select(Split::Test, SampleKind::Factual).size() ==
        120);
  CHECK(ds.select(Split::Test, SampleKind::Factual).size() == 24);
  CHECK(r.oracle.size() == 240);

  // Class means are orthonormal.
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      CHECK(dot(r.class_means.row(i), r.class_means.row(j)) == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-12));

  for (const auto& [id, o] : r.oracle) {
    const Sample* cf = ds.find(id);
    const Sample* f = ds.find(o.factual_id);
    REQUIRE(cf != nullptr);
    REQUIRE(f != nullptr);
    CHECK(cf->latent == o.mirror);
    CHECK(cf->label == o.target_class);
    // The midpoint has no component along the class-difference axis and is
    // the average of the pair.
    const Vector axis = sub(r.class_means.row(f->label), r.class_means.row(o.target_class));
    CHECK(std::abs(dot(o.midpoint, axis)) < 1e-12);
    const Vector avg = scaled(add(f->latent, cf->latent), 0.5);
    CHECK(norm(sub(avg, o.midpoint)) < 1e-12);
    CHECK(norm(f->latent) == doctest::Approx(1.0).epsilon(1e-12));
  }

  // Serialize and reload.
  const Dataset back = parse_dataset(serialize_dataset(ds));
  CHECK(serialize_dataset(back) == serialize_dataset(ds));
  CHECK(back.find("f000007")->latent == ds.find("f000007")->latent);

  // Same seed, same bytes.
  CHECK(serialize_dataset(synth_mirror_dataset(cfg).dataset) == serialize_dataset(ds));
  cfg.dim = 1;
  CHECK_THROWS_AS(synth_mirror_dataset(cfg), DataError);
}

TEST_CASE("dataset file io") {
  const auto path = (std::filesystem::temp_directory_path() / "crm_test_ds.tsv").string();
  const Dataset ds = parse_dataset(two_rows());
  save_dataset(path, ds);
  CHECK(serialize_dataset(load_dataset(path)) == serialize_dataset(ds));
  CHECK_THROWS_AS(load_dataset(path + ".missing"), DataError);
}
