#include <doctest.h>

#include <cmath>

#include "crp/fixtures.hpp"
#include "crp/image.hpp"
#include "crp/localize.hpp"
#include "crp/service.hpp"

using namespace crp;
using json = nlohmann::json;

namespace {

Session session_for(const std::string& name, bool with_index = false) {
  auto f = make_fixture(name);
  Session s{std::move(f.model), std::move(f.data), std::nullopt, RuleComposite::from_name("epsilon_zplus_flat"), false, 1};
  if (with_index) {
    IndexOptions opts;
    opts.layers = {"conv1"};
    opts.targets = {MaximizationTarget::parse("rel_sum"), MaximizationTarget::parse("act_max")};
    opts.k = 4;
    s.index = build_index(s.model, s.data, opts);
  }
  return s;
}

json post(Service& svc, const std::string& path, const json& body, int expect = 200) {
  const auto r = svc.handle("POST", path, {}, body.dump());
  CHECK_MESSAGE(r.status == expect, r.body);
  return json::parse(r.body);
}

}  // namespace

TEST_CASE("cache hits return the same body as a fresh computation") {
  Service cached(session_for("lenet_random"), 8);
  Service uncached(session_for("lenet_random"), 0);
  const json req = {{"sample", 3}, {"conditions", {"conv2:4"}}};
  const auto first = cached.handle("POST", "/attribute", {}, req.dump());
  const auto second = cached.handle("POST", "/attribute", {}, req.dump());
  const auto fresh = uncached.handle("POST", "/attribute", {}, req.dump());
  CHECK(first.status == 200);
  CHECK(cached.cache().hits() == 1);
  CHECK(first.body == second.body);
  CHECK(first.body == fresh.body);
  CHECK(uncached.cache().size() == 0);

  // Key order in the body does not matter.
  const auto reordered = cached.handle("POST", "/attribute", {}, R"({"conditions":["conv2:4"],"sample":3})");
  CHECK(cached.cache().hits() == 2);
  CHECK(reordered.body == first.body);
}

TEST_CASE("cache evicts the least recently used entry") {
  ResponseCache c(2);
  c.put("a", "1");
  c.put("b", "2");
  CHECK(c.get("a") == "1");
  c.put("c", "3");
  CHECK(!c.get("b"));
  CHECK(c.get("a") == "1");
  CHECK(c.get("c") == "3");
  CHECK(c.size() == 2);
}

TEST_CASE("attribute document matches a direct computation") {
  Service svc(session_for("lenet_random"));
  const auto doc = post(svc, "/attribute", {{"sample", 5}, {"class", 2}});
  const auto& s = svc.session();
  const auto trace = forward(s.model, s.data.sample(5));
  const auto rt = attribute(trace, ConditionSet{}, InitSpec::logit(2), s.rules);
  const auto map = rt.input_map();
  const auto values = doc["heatmap"]["values"].get<std::vector<double>>();
  REQUIRE(values.size() == 32 * 32);
  for (std::size_t i = 0; i < values.size(); ++i) CHECK(values[i] == map[i]);
  CHECK(doc["class"] == 2);
  CHECK(doc["heatmap"]["shape"] == json::array({32, 32}));
  CHECK(doc["layers"].size() == s.model.size() - 1);

  const auto bytes = base64_decode(doc["heatmap"]["crpw"].get<std::string>());
  CHECK(bytes == Service::heatmap_blob(map.reshaped(Shape{32, 32})));
  const auto png = base64_decode(doc["heatmap"]["png"].get<std::string>());
  CHECK(png.size() > 8);
  CHECK(png[1] == 'P');
}

TEST_CASE("a full-input region reproduces the concept ranking") {
  Service svc(session_for("lenet_random"));
  const auto region = post(svc, "/region", {{"sample", 7}, {"layer", "conv2"}, {"class", 1}});
  const auto concepts = svc.handle("GET", "/concepts/conv2", {{"sample", "7"}, {"class", "1"}}, "");
  REQUIRE(concepts.status == 200);
  const auto c = json::parse(concepts.body);
  REQUIRE(region["ranking"].size() == 16);
  REQUIRE(c["ranking"].size() == 16);
  double scale = 0.0;
  for (const auto& e : c["ranking"]) scale = std::max(scale, std::fabs(e["relevance"].get<double>()));
  for (std::size_t i = 0; i < 16; ++i) {
    CHECK(std::fabs(region["ranking"][i]["relevance"].get<double>() - c["ranking"][i]["relevance"].get<double>()) <
          1e-5 * scale);
  }
  CHECK(region["pixels"] == 32 * 32);

  const auto top = json::parse(svc.handle("GET", "/concepts/conv2", {{"sample", "7"}, {"top_n", "3"}}, "").body);
  CHECK(top["ranking"].size() == 3);
}

TEST_CASE("rect and mask regions agree") {
  Service svc(session_for("lenet_random"));
  std::vector<int> mask(32 * 32, 0);
  for (std::size_t y = 4; y < 12; ++y) {
    for (std::size_t x = 10; x < 20; ++x) mask[y * 32 + x] = 1;
  }
  const auto a = post(svc, "/region", {{"sample", 1}, {"layer", "conv1"}, {"rect", {{"top", 4}, {"left", 10}, {"height", 8}, {"width", 10}}}});
  const auto b = post(svc, "/region", {{"sample", 1}, {"layer", "conv1"}, {"mask", mask}});
  CHECK(a["ranking"] == b["ranking"]);
  CHECK(a["pixels"] == 80);
}

TEST_CASE("error kinds map to status codes") {
  Service svc(session_for("lenet_random"));
  auto status = [&](const std::string& m, const std::string& p, const std::string& body,
                    std::map<std::string, std::string> q = {}) { return svc.handle(m, p, q, body).status; };
  CHECK(status("POST", "/attribute", "{not json") == 400);
  CHECK(status("POST", "/attribute", "[1,2]") == 400);
  CHECK(status("POST", "/attribute", R"({"sample": 999})") == 404);
  CHECK(status("POST", "/attribute", R"({"sample": 0, "conditions": ["nope:1"]})") == 404);
  CHECK(status("POST", "/attribute", R"({"sample": 0, "conditions": ["conv2:99"]})") == 422);
  CHECK(status("POST", "/attribute", R"({"sample": 0, "rules": "bogus"})") == 400);
  CHECK(status("GET", "/concepts/nope", "", {{"sample", "0"}}) == 404);
  CHECK(status("GET", "/references/conv1/0", "") == 404);
  CHECK(status("POST", "/nowhere", "{}") == 404);
  CHECK(status("DELETE", "/attribute", "") == 405);
  CHECK(status("POST", "/region", R"({"sample":0,"layer":"conv1","mask":[1,0]})") == 400);

  const auto r = svc.handle("POST", "/attribute", {}, R"({"sample": 999})");
  const auto err = json::parse(r.body);
  CHECK(err["error"]["kind"] == "not_found");
  CHECK(!err["error"]["message"].get<std::string>().empty());
  CHECK(svc.cache().size() == 0);
}

TEST_CASE("references come from the index and refuse foreign indexes") {
  Service svc(session_for("singlepath", true));
  const auto r = svc.handle("GET", "/references/conv1/0", {{"k", "3"}}, "");
  REQUIRE(r.status == 200);
  const auto doc = json::parse(r.body);
  const auto ranking = svc.session().index->rank("conv1", 0, "rel_sum");
  REQUIRE(doc["entries"].size() == 3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(doc["entries"][i]["sample"] == ranking[i].sample);
  CHECK(doc["entries"][0].contains("thumbnail"));
  CHECK(svc.handle("GET", "/references/conv1/0", {{"k", "99"}}, "").status == 400);
  CHECK(svc.handle("GET", "/references/conv1/7", {}, "").status == 404);

  auto other = session_for("singlepath", true);
  other.index->model_fingerprint = "0000";
  Service stale(std::move(other));
  CHECK(stale.handle("GET", "/references/conv1/0", {}, "").status == 409);
  CHECK(json::parse(stale.handle("GET", "/meta", {}, "").body)["index"]["matches"] == false);
}

TEST_CASE("analysis endpoints return their documents") {
  Service svc(session_for("lenet_random"));
  const auto atlas = post(svc, "/atlas", {{"sample", 0}, {"layer", "conv2"}, {"grid", "4x4"}, {"top_n", 3}});
  CHECK(atlas["regions"].size() == 16);
  const auto g = post(svc, "/graph", {{"sample", 0}, {"root", "conv2:3"}, {"k", 2}});
  CHECK(g["format"] == "crp-graph");
  const auto flip = post(svc, "/flip", {{"sample", 0}, {"layer", "conv2"}, {"steps", 4}});
  CHECK(flip["steps"].size() == 5);
  const auto blend = post(svc, "/blend", {{"sample", 0}, {"donor", 1}, {"layer", "conv2"}, {"alphas", {0.0, 1.0}}, {"track", {"conv2:0"}}});
  CHECK(blend["points"].size() == 2);
  CHECK(blend["points"][0]["logits"] == json::parse(svc.handle("POST", "/predict", {}, R"({"sample":0})").body)["logits"]);
  post(svc, "/blend", {{"sample", 0}, {"donor", 1}, {"layer", "fc1"}}, 400);
  post(svc, "/graph", {{"sample", 0}, {"root", "conv2"}}, 400);
  const auto spec = json::parse(svc.handle("GET", "/openapi.json", {}, "").body);
  CHECK(spec["paths"].contains("/attribute"));
  CHECK(spec["paths"].size() == 10);
}
