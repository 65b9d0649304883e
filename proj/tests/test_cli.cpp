#include <filesystem>
#include <sstream>

#include "doctest.h"
#include "spn/cli.hpp"
#include "spn/config.hpp"
#include "spn/io.hpp"
#include "tiny_config.hpp"

using namespace spn;
using namespace spn::testing;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "spn");
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path temp_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("spn_test_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string tiny_config_text(bool zero_head, int steps) {
  RunConfig rc;
  rc.model = tiny_config(2, 2, 3);
  rc.model.zero_head = zero_head;
  rc.train.batch_size = 2;
  rc.train.learning_rate = 1e-3;
  rc.train.lr_drops = {};
  rc.train.steps = steps;
  rc.loop.log_every = 5;
  return format_config(rc);
}

}  // namespace

TEST_CASE("slice prints the subscale slices of a ramp") {
  auto dir = temp_dir("slice");
  std::vector<std::uint8_t> v;
  for (int k = 0; k < 16; ++k) v.insert(v.end(), 3, static_cast<std::uint8_t>(k));
  io::write_ppm(dir / "ramp.ppm", ImageTensor(4, 4, 8, v));

  auto r = cli({"slice", "--S", "2", "--in", (dir / "ramp.ppm").string(), "--out", dir.string()});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("slice (0,0):\n0 2\n8 10\n") != std::string::npos);
  CHECK(r.out.find("slice (0,1):\n1 3\n9 11\n") != std::string::npos);
  CHECK(r.out.find("slice (1,1):\n5 7\n13 15\n") != std::string::npos);
  CHECK(r.err.find("config_hash=") != std::string::npos);
  CHECK(io::read_ppm(dir / "slice_1_0.ppm") == ImageTensor(2, 2, 8, {4, 4, 4, 6, 6, 6, 12, 12, 12, 14, 14, 14}));
}

TEST_CASE("verify passes") {
  auto r = cli({"verify"});
  CHECK(r.code == 0);
  CHECK(r.out.find("FAIL") == std::string::npos);
  CHECK(r.out.find("PASS") != std::string::npos);
}

TEST_CASE("eval of a zero-head model is exactly the depth") {
  auto dir = temp_dir("eval");
  REQUIRE(cli({"synth", "--kind", "blobs", "--count", "2", "--valid", "2", "--height", "4", "--width", "4",
               "--depth", "8", "--out", (dir / "data").string()})
              .code == 0);
  io::write_file(dir / "uniform.conf", tiny_config_text(true, 1));
  auto r = cli({"eval", "--config", (dir / "uniform.conf").string(), "--data", (dir / "data/manifest.txt").string()});
  CHECK(r.code == 0);
  CHECK(r.out == "3.0000\n");
}

TEST_CASE("train, resume, eval and sample through the cli") {
  auto dir = temp_dir("train");
  const auto data = (dir / "data/manifest.txt").string();
  REQUIRE(cli({"synth", "--count", "4", "--valid", "1", "--height", "4", "--width", "4", "--depth", "3", "--out",
               (dir / "data").string()})
              .code == 0);
  io::write_file(dir / "tiny.conf", tiny_config_text(false, 10));

  auto r = cli({"train", "--config", (dir / "tiny.conf").string(), "--data", data, "--out", (dir / "run").string(),
                "--seed", "7"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(r.err.find("seed=7 config_hash=") != std::string::npos);
  const auto log = io::read_file(dir / "run/metrics.log");
  CHECK(log.find("step=10 bits_per_dim=") != std::string::npos);
  const auto ckpt = (dir / "run/model.ckpt").string();
  CHECK(io::load_checkpoint(ckpt).step == 10);

  r = cli({"train", "--config", (dir / "tiny.conf").string(), "--data", data, "--out", (dir / "run").string(),
           "--checkpoint", ckpt, "--steps", "15"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(io::load_checkpoint(ckpt).step == 15);

  r = cli({"eval", "--checkpoint", ckpt, "--data", data});
  CHECK(r.code == 0);
  CHECK(std::stod(r.out) > 0);

  r = cli({"sample", "--checkpoint", ckpt, "--out", (dir / "s.ppm").string(), "--seed", "3", "--temperature", "0.9"});
  REQUIRE(r.code == 0);
  auto img = io::read_ppm_native(dir / "s.ppm");
  CHECK(img.depth() == 3);
  CHECK(img.height() == 4);
}

TEST_CASE("contract violations exit nonzero") {
  CHECK(cli({}).code != 0);
  CHECK(cli({"bogus"}).code != 0);
  CHECK(cli({"slice", "--in", "/nonexistent.ppm"}).code != 0);
  CHECK(cli({"eval", "--data", "/nonexistent/manifest.txt"}).code != 0);

  auto dir = temp_dir("errors");
  REQUIRE(cli({"synth", "--count", "1", "--height", "4", "--width", "4", "--depth", "2", "--out",
               (dir / "data").string()})
              .code == 0);
  io::write_file(dir / "tiny.conf", tiny_config_text(false, 1));
  // A 2-bit dataset cannot feed a 3-bit model.
  auto r = cli({"train", "--config", (dir / "tiny.conf").string(), "--data", (dir / "data/manifest.txt").string(),
                "--out", (dir / "run").string()});
  CHECK(r.code != 0);
  CHECK(r.err.find("depth") != std::string::npos);
}
