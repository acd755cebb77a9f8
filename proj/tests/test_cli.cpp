#include <doctest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include <json.hpp>

#include "crp/fixtures.hpp"
#include "crp/image.hpp"
#include "crp/model_io.hpp"
#include "crp/service.hpp"

using namespace crp;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
};

Run run(const std::string& args) {
  const std::string cmd = std::string(CRP_CLI) + " " + args + " 2>/dev/null";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::string out;
  std::array<char, 4096> buf{};
  std::size_t n;
  while ((n = fread(buf.data(), 1, buf.size(), pipe)) > 0) out.append(buf.data(), n);
  const int status = pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

// Fixture files written once per process into a scratch directory.
struct Workspace {
  fs::path dir;
  std::string model;
  std::string data;

  Workspace() {
    dir = fs::temp_directory_path() / ("crp_cli_" + std::to_string(::getpid()));
    fs::create_directories(dir);
    REQUIRE(run("make-fixture --name lenet_random --output-dir " + dir.string()).code == 0);
    model = "--model " + (dir / "lenet_random.json").string() + " --weights " + (dir / "lenet_random.crpw").string();
    data = (dir / "lenet_random.crpd").string();
  }
  ~Workspace() { fs::remove_all(dir); }
};

Workspace& workspace() {
  static Workspace w;
  return w;
}

}  // namespace

TEST_CASE("help text matches the golden files") {
  CHECK(run("--help").out == slurp(fs::path(CRP_GOLDEN_DIR) / "crp.txt"));
  for (const char* cmd : {"predict", "attribute", "index", "references", "atlas", "local", "graph", "flip", "blend",
                          "similarity", "serve", "make-fixture"}) {
    const auto r = run(std::string(cmd) + " --help");
    CHECK(r.code == 0);
    CHECK_MESSAGE(r.out == slurp(fs::path(CRP_GOLDEN_DIR) / (std::string(cmd) + ".txt")), cmd);
  }
}

TEST_CASE("attribute writes the same document the service returns") {
  auto& w = workspace();
  const auto out = w.dir / "attr";
  const auto r = run("attribute " + w.model + " --sample " + w.data + ":4 --output-dir " + out.string());
  REQUIRE(r.code == 0);
  const auto summary = json::parse(r.out);
  const auto written = json::parse(slurp(out / "attribute.json"));

  const auto f = make_fixture("lenet_random");
  Session s{f.model, f.data, std::nullopt, RuleComposite::from_name("epsilon_zplus_flat"), false, 1};
  Service svc(std::move(s), 0);
  const auto served = svc.handle("POST", "/attribute", {}, R"({"sample": 4})");
  REQUIRE(served.status == 200);
  CHECK(written == json::parse(served.body));

  const auto blob = read_file_bytes(out / "heatmap.crpw");
  CHECK(base64_encode(blob) == written["heatmap"]["crpw"].get<std::string>());
  CHECK(summary["layer_sums"].size() == f.model.size() - 1);
  CHECK(summary["class"] == written["class"]);
}

TEST_CASE("index output is byte-identical across runs and worker counts") {
  auto& w = workspace();
  const std::string args = "index " + w.model + " --data " + w.data + " --layers conv1,conv2 --targets rel_sum,act_max --k 40";
  REQUIRE(run(args + " --workers 1 --output-dir " + (w.dir / "i1").string()).code == 0);
  REQUIRE(run(args + " --workers 4 --output-dir " + (w.dir / "i4").string()).code == 0);
  CHECK(slurp(w.dir / "i1/index/index.crpw") == slurp(w.dir / "i4/index/index.crpw"));
  CHECK(slurp(w.dir / "i1/index/index.json") == slurp(w.dir / "i4/index/index.json"));
}

TEST_CASE("atlas over a 4x4 grid lists five channels per region") {
  auto& w = workspace();
  const auto out = w.dir / "atlas";
  const auto r = run("atlas " + w.model + " --sample " + w.data + ":0 --grid 4x4 --layer conv2 --top 5 --output-dir " +
                     out.string());
  REQUIRE(r.code == 0);
  const auto doc = json::parse(slurp(out / "atlas.json"));
  REQUIRE(doc["regions"].size() == 16);
  for (const auto& region : doc["regions"]) {
    CHECK(region["ranking"].size() == 5);
    double total = 0.0;
    for (const auto& e : region["ranking"]) total += e["share"].get<double>();
    CHECK(total <= 1.0 + 1e-12);
  }
}

TEST_CASE("config files supply defaults that flags override") {
  auto& w = workspace();
  const auto cfg = w.dir / "run.toml";
  std::ofstream(cfg) << "[model]\nmanifest = \"" << (w.dir / "lenet_random.json").string() << "\"\nweights = \""
                     << (w.dir / "lenet_random.crpw").string() << "\"\n[run]\noutput = \"" << (w.dir / "from_config").string()
                     << "\"\n[attribution]\ncomposite = \"zplus_flat\"\n";
  auto r = run("attribute --config " + cfg.string() + " --sample " + w.data + ":1");
  REQUIRE(r.code == 0);
  CHECK(fs::exists(w.dir / "from_config/heatmap.crpw"));
  CHECK(json::parse(r.out)["rules"].get<std::string>() == RuleComposite::zplus_flat().canonical());

  r = run("attribute --config " + cfg.string() + " --rules epsilon --sample " + w.data + ":1 --output-dir " +
          (w.dir / "from_flag").string());
  REQUIRE(r.code == 0);
  CHECK(fs::exists(w.dir / "from_flag/heatmap.crpw"));
  CHECK(json::parse(r.out)["rules"].get<std::string>() == RuleComposite::uniform(Rule::epsilon).canonical());
}

TEST_CASE("errors exit with their class code") {
  auto& w = workspace();
  CHECK(run("").code == 2);
  CHECK(run("attribute --sample x.crpd:0").code == 2);
  CHECK(run("attribute " + w.model + " --sample " + w.data + ":9999").code == 2);
  CHECK(run("attribute " + w.model + " --sample " + w.data + ":0 --cond conv2:99").code == 2);
  CHECK(run("attribute " + w.model + " --sample " + w.data).code == 2);
  const auto bad = w.dir / "bad.crpd";
  std::ofstream(bad) << "not a container";
  CHECK(run("attribute " + w.model + " --sample " + bad.string() + ":0").code == 3);
  CHECK(run("make-fixture --name nope --output-dir " + w.dir.string()).code == 2);
}

TEST_CASE("shipped fixture files match a fresh generation") {
  auto& w = workspace();
  const auto out = w.dir / "fixtures";
  for (const char* name : {"mlp8", "singlepath", "lenet_random", "resnet_micro", "conv_bn"}) {
    REQUIRE(run(std::string("make-fixture --name ") + name + " --output-dir " + out.string()).code == 0);
    for (const char* ext : {".json", ".crpw", ".crpd"}) {
      const std::string file = std::string(name) + ext;
      CHECK_MESSAGE(slurp(out / file) == slurp(fs::path(CRP_FIXTURE_DIR) / file), file);
    }
  }
}
