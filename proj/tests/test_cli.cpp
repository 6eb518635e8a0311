#include <doctest.h>

#include <fstream>
#include <iterator>
#include <sstream>

#include "namseg/cli.hpp"
#include "namseg/data.hpp"
#include "namseg/text.hpp"
#include "support.hpp"

using namespace namseg;
namespace fs = std::filesystem;

namespace {

int run(std::vector<std::string> args, std::string* err_out = nullptr) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  if (err_out) *err_out = err.str();
  return code;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

// Relative path -> contents for every regular file under dir.
std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = slurp(e.path());
  }
  return out;
}

std::vector<std::vector<std::string>> csv_rows(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream is(slurp(p));
  std::string line;
  while (std::getline(is, line)) rows.push_back(text::split(line, ','));
  return rows;
}

std::string path(const fs::path& p) { return p.string(); }

const std::vector<std::string> kSmallData{"--pos", "12", "--neg", "12", "--height", "32",
                                          "--width", "32", "--radius-max", "5"};

std::vector<std::string> with(std::vector<std::string> base, const std::vector<std::string>& more) {
  base.insert(base.end(), more.begin(), more.end());
  return base;
}

}  // namespace

TEST_CASE("synth is reproducible and echoes the split ratio") {
  testing::TempDir dir("cli_synth");
  REQUIRE(run(with({"synth", "--seed", "7", "--out", path(dir / "a")}, kSmallData)) == 0);
  REQUIRE(run(with({"synth", "--seed", "7", "--out", path(dir / "b")}, kSmallData)) == 0);
  CHECK(tree(dir / "a") == tree(dir / "b"));
  const auto manifest = read_key_values(dir / "a" / "manifest.txt");
  CHECK(manifest.at("split_ratio") == "4:1:1");
  CHECK(manifest.at("seed") == "7");
}

TEST_CASE("usage errors exit with 2") {
  testing::TempDir dir("cli_usage");
  std::string err;
  CHECK(run({"synth", "--out", path(dir / "x")}, &err) == 2);
  CHECK(err.find("--seed") != std::string::npos);
  CHECK(run({}) == 2);
  CHECK(run({"frobnicate"}) == 2);
  CHECK(run({"synth", "--seed", "1", "--out", path(dir / "x"), "--bogus", "3"}) == 2);
  CHECK(run({"train", "--data", path(dir.path()), "--out", path(dir / "m")}) == 2);
  CHECK(run({"synth", "--seed", "1", "--out", path(dir / "x"), "--config", path(dir / "none.cfg")}) == 2);
  CHECK(run({"synth", "--help"}) == 0);
}

TEST_CASE("config files are overridden by flags") {
  testing::TempDir dir("cli_config");
  {
    std::ofstream cfg(dir / "synth.cfg");
    cfg << "seed=3\npos=6\nneg=6\nheight=32\nwidth=32\nradius-max=5\nnoise=0.02\n";
  }
  REQUIRE(run({"synth", "--config", path(dir / "synth.cfg"), "--out", path(dir / "d"), "--noise",
               "0.04"}) == 0);
  const auto manifest = read_key_values(dir / "d" / "manifest.txt");
  CHECK(manifest.at("seed") == "3");
  CHECK(manifest.at("noise_sigma") == "0.04");
  CHECK(manifest.at("n_pos") == "6");
}

TEST_CASE("train, segment and eval wiring") {
  testing::TempDir dir("cli_pipeline");
  const std::string data = path(dir / "data");
  REQUIRE(run(with({"synth", "--seed", "5", "--out", data}, kSmallData)) == 0);

  const std::vector<std::string> small_train{"--channels", "4,8,8", "--head-channels", "4",
                                             "--epochs", "2", "--batch", "6"};
  SUBCASE("learning-rate defaults follow the number of taps") {
    for (const auto& [taps, lr] : std::vector<std::pair<std::string, std::string>>{
             {"1", "0.01"}, {"2", "0.002"}, {"3", "0.001"}}) {
      const fs::path out = dir / ("m" + taps);
      REQUIRE(run(with({"train", "--data", data, "--out", path(out), "--seed", "1", "--gap-taps", taps},
                       small_train)) == 0);
      const auto m = read_key_values(out / "manifest.txt");
      CHECK(m.at("initial_lr") == lr);
      CHECK(m.at("lr_decay_per_epoch") == "0.99");
      CHECK(m.at("gap_heads") == taps);
    }
    REQUIRE(run({"train", "--data", data, "--out", path(dir / "d"), "--seed", "1", "--epochs", "1",
                 "--channels", "4,8,8", "--head-channels", "4"}) == 0);
    CHECK(read_key_values(dir / "d" / "manifest.txt").at("batch_size") == "30");
  }

  SUBCASE("training reruns are identical") {
    REQUIRE(run(with({"train", "--data", data, "--out", path(dir / "r1"), "--seed", "2"}, small_train)) == 0);
    REQUIRE(run(with({"train", "--data", data, "--out", path(dir / "r2"), "--seed", "2"}, small_train)) == 0);
    CHECK(slurp(dir / "r1" / "train_log.csv") == slurp(dir / "r2" / "train_log.csv"));
    CHECK(slurp(dir / "r1" / "model.bin") == slurp(dir / "r2" / "model.bin"));
    CHECK(csv_rows(dir / "r1" / "train_log.csv").size() == 3);
  }

  SUBCASE("missing inputs are runtime failures") {
    CHECK(run({"train", "--data", path(dir / "nope"), "--out", path(dir / "m"), "--seed", "1"}) == 1);
    CHECK(run({"segment", "--data", data, "--model", path(dir / "nope.bin"), "--out",
               path(dir / "s")}) == 1);
  }

  SUBCASE("segment logs every slice and eval scores the masks") {
    const fs::path model = dir / "m1";
    REQUIRE(run(with({"train", "--data", data, "--out", path(model), "--seed", "1"}, small_train)) == 0);
    const std::string weights = path(model / "model.bin");
    REQUIRE(run({"segment", "--data", data, "--model", weights, "--out", path(dir / "fine"),
                 "--dump-nam", "--dump-phases", "--pbm"}) == 0);
    REQUIRE(run({"segment", "--data", data, "--model", weights, "--out", path(dir / "coarse"),
                 "--coarse-only"}) == 0);

    const DatasetIndex index = read_dataset_index(data);
    const auto rows = csv_rows(dir / "fine" / "decisions.csv");
    REQUIRE(rows.size() == index.ids_in("test").size() + 1);
    CHECK(rows[0] == std::vector<std::string>{"id", "classified", "probability", "outcome",
                                              "scope_origin", "candidates", "selected"});
    for (std::size_t i = 1; i < rows.size(); ++i) {
      const std::string mask = rows[i][0] + ".masks";
      if (rows[i][1] == "no_nodule") {
        CHECK_FALSE(fs::exists(dir / "fine" / "masks" / mask));
        CHECK(rows[i][3] == "no_nodule");
      }
      const bool fine = fs::exists(dir / "fine" / "masks" / mask);
      CHECK(fine == fs::exists(dir / "coarse" / "masks" / mask));
      if (fine && rows[i][5] == "1") {
        CHECK(slurp(dir / "fine" / "masks" / mask) == slurp(dir / "coarse" / "masks" / mask));
      }
    }

    REQUIRE(run({"eval", "--data", data, "--pred", path(dir / "fine"), "--pred", path(dir / "coarse"),
                 "--out", path(dir / "eval")}) == 0);
    const auto metrics = csv_rows(dir / "eval" / "metrics.csv");
    REQUIRE(metrics.size() == 3);
    CHECK(metrics[1][0] == "fine");
    CHECK(metrics[2][0] == "coarse");
    CHECK(fs::exists(dir / "eval" / "size_bins.csv"));
  }

  SUBCASE("oracle and empty predictions") {
    const DatasetIndex index = read_dataset_index(data);
    fs::create_directories(dir / "oracle" / "masks");
    fs::create_directories(dir / "empty" / "masks");
    for (std::size_t id : index.ids_in("test")) {
      if (index.labels.at(id) == Label::nodule) {
        fs::copy_file(dir / "data" / "truth" / (sample_name(id) + ".masks"),
                      dir / "oracle" / "masks" / (sample_name(id) + ".masks"));
      }
    }
    REQUIRE(run({"eval", "--data", data, "--pred", path(dir / "oracle"), "--pred", path(dir / "empty"),
                 "--name", "oracle", "--name", "empty", "--out", path(dir / "eval")}) == 0);
    const auto m = csv_rows(dir / "eval" / "metrics.csv");
    CHECK(m[1][5] == "1.000000");   // tpr
    CHECK(m[1][8] == "1.000000");   // dice_mean
    CHECK(m[2][5] == "0.000000");

    // A prediction for a slice outside the evaluated split is an id mismatch.
    const std::size_t train_id = index.ids_in("train").front();
    fs::copy_file(dir / "data" / "truth" / (sample_name(train_id) + ".masks"),
                  dir / "empty" / "masks" / (sample_name(train_id) + ".masks"));
    CHECK(run({"eval", "--data", data, "--pred", path(dir / "empty"), "--out", path(dir / "e2")}) == 1);
  }
}

TEST_CASE("eval reproduces the checked-in fixture") {
  testing::TempDir dir("cli_fixture");
  const fs::path root = fs::path(NAMSEG_FIXTURES) / "eval10";
  REQUIRE(run({"eval", "--data", path(root / "data"), "--pred", path(root / "pred"), "--name", "fixture",
               "--px-to-mm2", "0.5", "--bins", "0,3,3.5,inf", "--out", path(dir / "out")}) == 0);
  CHECK(slurp(dir / "out" / "metrics.csv") == slurp(root / "expected_metrics.csv"));
  CHECK(slurp(dir / "out" / "size_bins.csv") == slurp(root / "expected_size_bins.csv"));
}
