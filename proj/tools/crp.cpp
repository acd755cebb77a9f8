#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>

#include "crp/config.hpp"
#include "crp/evaluate.hpp"
#include "crp/fixtures.hpp"
#include "crp/image.hpp"
#include "crp/localize.hpp"
#include "crp/parallel.hpp"
#include "crp/service.hpp"

using namespace crp;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::usage:
    case ErrorKind::not_found:
    case ErrorKind::invalid_condition: return 2;
    case ErrorKind::format:
    case ErrorKind::fingerprint:
    case ErrorKind::shape: return 3;
    case ErrorKind::compute: return 4;
  }
  return 4;
}

int report(const std::string& kind, const std::string& message, int code) {
  std::cerr << json{{"error", {{"kind", kind}, {"message", message}}}}.dump() << "\n";
  return code;
}

// Flags shared by every command. Each overrides the matching config entry
// only when given on the command line.
struct CommonFlags {
  std::string config, model, weights, output_dir, rules;
  double epsilon = 0.0;
  std::vector<std::string> overrides;
  bool normalize = false;
  std::size_t workers = 0;
  std::uint64_t seed = 0;
  CLI::Option *model_opt, *weights_opt, *output_opt, *rules_opt, *epsilon_opt, *normalize_opt, *workers_opt, *seed_opt;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "TOML run configuration; flags override its entries");
  f.model_opt = cmd->add_option("--model", f.model, "model manifest (JSON)");
  f.weights_opt = cmd->add_option("--weights", f.weights, "model weights (CRPW)");
  f.output_opt = cmd->add_option("--output-dir", f.output_dir, "directory for artifacts (env CRP_OUTPUT_DIR, default .)");
  f.workers_opt = cmd->add_option("--workers", f.workers, "worker threads (env CRP_WORKERS, default all cores)");
  f.rules_opt = cmd->add_option("--rules", f.rules, "rule composite: epsilon_zplus_flat, zplus_flat, epsilon, zplus, flat");
  f.epsilon_opt = cmd->add_option("--epsilon", f.epsilon, "stabilizer of the epsilon rule");
  cmd->add_option("--rule-override", f.overrides, "per-layer rule as layer=rule (repeatable)");
  f.normalize_opt = cmd->add_flag("--normalize", f.normalize, "normalize relevance per layer");
  f.seed_opt = cmd->add_option("--seed", f.seed, "random seed");
}

RunConfig resolve_config(const CommonFlags& f) {
  RunConfig c;
  if (!f.config.empty()) c = RunConfig::from_toml(TomlDocument::load(f.config));
  if (f.model_opt->count()) c.manifest = f.model;
  if (f.weights_opt->count()) c.weights = f.weights;
  if (f.output_opt->count()) c.output_dir = f.output_dir;
  if (f.workers_opt->count()) c.workers = f.workers;
  if (f.rules_opt->count()) c.composite = f.rules;
  if (f.epsilon_opt->count()) c.epsilon = f.epsilon;
  if (f.normalize_opt->count()) c.normalize = f.normalize;
  if (f.seed_opt->count()) c.seed = f.seed;
  for (const auto& o : f.overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) fail(ErrorKind::usage, "--rule-override expects layer=rule, got '" + o + "'");
    c.rule_overrides[o.substr(0, eq)] = o.substr(eq + 1);
  }
  if (c.output_dir.empty()) {
    const char* env = std::getenv("CRP_OUTPUT_DIR");
    c.output_dir = env && *env ? env : ".";
  }
  if (c.workers == 0) c.workers = default_workers();
  return c;
}

void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) fail(ErrorKind::usage, "missing " + what);
  if (!fs::exists(path)) fail(ErrorKind::usage, what + " '" + path + "' does not exist");
}

RuleComposite rules_from(const RunConfig& c) {
  auto r = RuleComposite::from_name(c.composite);
  if (c.epsilon) r.epsilon = *c.epsilon;
  for (const auto& [layer, rule] : c.rule_overrides) r.overrides[layer] = rule_from_string(rule);
  return r;
}

struct SampleRef {
  std::string file;
  std::size_t index = 0;
};

SampleRef parse_sample(const std::string& s) {
  const auto colon = s.rfind(':');
  if (colon == std::string::npos) fail(ErrorKind::usage, "sample must be file.crpd:index, got '" + s + "'");
  try {
    std::size_t used = 0;
    const auto idx = std::stoul(s.substr(colon + 1), &used);
    if (used != s.size() - colon - 1) throw std::invalid_argument("index");
    return {s.substr(0, colon), idx};
  } catch (const std::exception&) {
    fail(ErrorKind::usage, "sample must be file.crpd:index, got '" + s + "'");
  }
}

Session open_session(const RunConfig& c, const std::string& data_path, const std::string& index_dir = "") {
  require_file(c.manifest, "model manifest (--model)");
  require_file(c.weights, "model weights (--weights)");
  require_file(data_path, "dataset");
  if (!index_dir.empty()) require_file(index_dir, "index directory");
  Session s{load_model(c.manifest, c.weights), load_dataset(data_path), std::nullopt, rules_from(c), c.normalize,
            c.workers};
  if (!index_dir.empty()) s.index = ReferenceIndex::load(index_dir);
  return s;
}

fs::path output_dir(const RunConfig& c) {
  fs::create_directories(c.output_dir);
  return c.output_dir;
}

json sample_request(const SampleRef& ref, const std::optional<long>& cls, const std::vector<std::string>& conds) {
  json req = {{"sample", ref.index}};
  if (cls) req["class"] = *cls;
  if (!conds.empty()) req["conditions"] = conds;
  return req;
}

void emit(json summary) { std::cout << summary.dump(2) << "\n"; }

std::vector<std::size_t> parse_rect(const std::string& s) {
  std::vector<std::size_t> v;
  std::stringstream in(s);
  std::string part;
  while (std::getline(in, part, ',')) {
    try {
      v.push_back(std::stoul(part));
    } catch (const std::exception&) {
      v.clear();
      break;
    }
  }
  if (v.size() != 4) fail(ErrorKind::usage, "--rect expects top,left,height,width");
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Concept relevance propagation: conditional attributions, reference samples and concept analysis"};
  app.name("crp");
  app.require_subcommand(1);

  std::map<CLI::App*, CommonFlags> common;
  std::string sample, donor, data, index_dir, layer, grid, regions, root, order = "desc", target = "rel_sum", bind = "127.0.0.1";
  std::string rect, mask_path, fixture_name;
  std::optional<long> cls;
  std::vector<std::string> conds, layers, targets, tracks;
  std::vector<double> alphas;
  std::size_t k = 0, top = 5, channel = 0, steps = 0, cache_entries = 256;
  int port = 8760;
  bool ascending = false, class_conditional = false, no_density = false, png = false, mean = false;

  auto with_sample = [&](CLI::App* cmd, bool conditioned) {
    cmd->add_option("--sample", sample, "sample address file.crpd:index")->required();
    cmd->add_option("--class", cls, "output class to explain (default: predicted)");
    if (conditioned) cmd->add_option("--cond", conds, "concept condition layer:ch[,ch...] (repeatable, AND across layers)");
  };

  auto* predict = app.add_subcommand("predict", "forward one sample and print logits");
  add_common(predict, common[predict]);
  predict->add_option("--sample", sample, "sample address file.crpd:index")->required();

  auto* attribute = app.add_subcommand("attribute", "conditional heatmap with per-layer relevance sums");
  add_common(attribute, common[attribute]);
  with_sample(attribute, true);
  attribute->add_flag("--png", png, "also write heatmap.png");

  auto* index = app.add_subcommand("index", "build the RelMax/ActMax reference index");
  add_common(index, common[index]);
  index->add_option("--data", data, "dataset (CRPD)")->required();
  index->add_option("--layers", layers, "layers to index (comma separated)")->required()->delimiter(',');
  index->add_option("--targets", targets, "targets: rel_sum, rel_max, act_sum, act_max, ...")->delimiter(',');
  index->add_option("--k", k, "references kept per channel (default 40)");
  index->add_flag("--class-conditional", class_conditional, "also rank per output class");

  auto* references = app.add_subcommand("references", "top reference samples of a channel");
  add_common(references, common[references]);
  references->add_option("--data", data, "dataset the index was built from")->required();
  references->add_option("--index", index_dir, "index directory")->required();
  references->add_option("--layer", layer, "layer id")->required();
  references->add_option("--channel", channel, "channel")->required();
  references->add_option("--target", target, "ranking target (default rel_sum)");
  references->add_option("--class", cls, "restrict to samples of this class");
  references->add_option("--k", k, "number of references (default 8)");

  auto* atlas = app.add_subcommand("atlas", "concept atlas over image regions");
  add_common(atlas, common[atlas]);
  with_sample(atlas, true);
  atlas->add_option("--layer", layer, "layer whose channels are mapped")->required();
  atlas->add_option("--grid", grid, "grid partition RxC (default 4x4)");
  atlas->add_option("--regions", regions, "region map: indexed PNG or CRPW with int tensor 'regions'");
  atlas->add_option("--top", top, "channels listed per region (default 5)");
  atlas->add_flag("--no-density-threshold", no_density, "do not flag low-density regions");

  auto* local = app.add_subcommand("local", "channels ranked by relevance inside a region");
  add_common(local, common[local]);
  with_sample(local, true);
  local->add_option("--layer", layer, "layer id")->required();
  local->add_option("--rect", rect, "region top,left,height,width (default: whole input)");
  local->add_option("--mask", mask_path, "region mask: nonzero pixels of an indexed PNG or CRPW region map");

  auto* graph = app.add_subcommand("graph", "attribution graph below a concept");
  add_common(graph, common[graph]);
  with_sample(graph, true);
  graph->add_option("--root", root, "root concept layer:channel")->required();
  graph->add_option("--layers", layers, "lower layers to expand, nearest first (comma separated)")->delimiter(',');
  graph->add_option("--k", k, "children kept per node (default 3)");
  graph->add_flag("--ascending", ascending, "keep the most negative children instead");

  auto* flip = app.add_subcommand("flip", "filter flipping curve");
  add_common(flip, common[flip]);
  with_sample(flip, true);
  flip->add_option("--layer", layer, "layer whose channels are disabled")->required();
  flip->add_option("--order", order, "desc, asc or random (default desc)");
  flip->add_option("--steps", steps, "channels to disable (default all)");

  auto* blend = app.add_subcommand("blend", "concept insertion by blending donor activations");
  add_common(blend, common[blend]);
  with_sample(blend, true);
  blend->add_option("--donor", donor, "donor sample file.crpd:index")->required();
  blend->add_option("--layer", layer, "layer to edit")->required();
  blend->add_option("--alphas", alphas, "blend factors, strictly ascending in [0,1] (default 0,0.25,0.5,0.75,1)")
      ->delimiter(',');
  blend->add_option("--rect", rect, "edited region in layer coordinates top,left,height,width (default: all)");
  blend->add_flag("--mean", mean, "blend toward the donor's channel means");
  blend->add_option("--track", tracks, "relevance to record as layer:channel (repeatable)");

  auto* similarity = app.add_subcommand("similarity", "channel similarity from reference samples");
  add_common(similarity, common[similarity]);
  similarity->add_option("--data", data, "dataset the index was built from")->required();
  similarity->add_option("--index", index_dir, "index directory")->required();
  similarity->add_option("--layer", layer, "layer id")->required();
  similarity->add_option("--k", k, "references per channel (default 8)");
  similarity->add_option("--target", target, "ranking target (default rel_sum)");

  auto* serve = app.add_subcommand("serve", "HTTP service for the explorer");
  add_common(serve, common[serve]);
  serve->add_option("--data", data, "dataset (CRPD)")->required();
  serve->add_option("--index", index_dir, "index directory (optional)");
  serve->add_option("--bind", bind, "bind address (default 127.0.0.1)");
  serve->add_option("--port", port, "port (default 8760)");
  serve->add_option("--cache", cache_entries, "cached responses (default 256)");

  auto* make_fixture_cmd = app.add_subcommand("make-fixture", "write a built-in fixture model and dataset");
  make_fixture_cmd->add_option("--name", fixture_name, "mlp8, singlepath, lenet_random, resnet_micro or conv_bn")
      ->required();
  std::string fixture_out = ".";
  make_fixture_cmd->add_option("--output-dir", fixture_out, "directory for <name>.json, <name>.crpw, <name>.crpd");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report("usage", e.what(), 2);
  }

  try {
    if (make_fixture_cmd->parsed()) {
      const auto f = make_fixture(fixture_name);
      fs::create_directories(fixture_out);
      const fs::path base = fs::path(fixture_out) / fixture_name;
      save_model(f.model, base.string() + ".json", base.string() + ".crpw");
      save_dataset(f.data, base.string() + ".crpd");
      emit({{"command", "make-fixture"},
            {"fixture", fixture_name},
            {"outputs", {base.string() + ".json", base.string() + ".crpw", base.string() + ".crpd"}}});
      return 0;
    }

    const RunConfig config = resolve_config(common.at(app.get_subcommands().front()));

    if (predict->parsed()) {
      const auto ref = parse_sample(sample);
      Service svc(open_session(config, ref.file), 0);
      auto doc = svc.predict({{"sample", ref.index}});
      doc["command"] = "predict";
      emit(doc);
    } else if (attribute->parsed()) {
      const auto ref = parse_sample(sample);
      Service svc(open_session(config, ref.file), 0);
      const auto doc = svc.attribute(sample_request(ref, cls, conds));
      const auto dir = output_dir(config);
      write_file_bytes(dir / "heatmap.crpw", base64_decode(doc["heatmap"]["crpw"].get<std::string>()));
      write_text_file(dir / "attribute.json", doc.dump() + "\n");
      json outputs = {(dir / "heatmap.crpw").string(), (dir / "attribute.json").string()};
      if (png) {
        write_file_bytes(dir / "heatmap.png", base64_decode(doc["heatmap"]["png"].get<std::string>()));
        outputs.push_back((dir / "heatmap.png").string());
      }
      json sums = json::object();
      for (const auto& l : doc["layers"]) sums[l["id"].get<std::string>()] = l["sum"];
      emit({{"command", "attribute"},
            {"sample", ref.index},
            {"class", doc["class"]},
            {"condition", doc["condition"]},
            {"rules", doc["rules"]},
            {"input_sum", doc["input_sum"]},
            {"layer_sums", sums},
            {"outputs", outputs}});
    } else if (index->parsed()) {
      const auto session = open_session(config, data);
      IndexOptions opts;
      opts.layers = layers;
      if (targets.empty()) targets = {"rel_sum"};
      for (const auto& t : targets) {
        auto target_spec = MaximizationTarget::parse(t);
        target_spec.rules = session.rules;
        opts.targets.push_back(target_spec);
      }
      if (k) opts.k = k;
      opts.workers = config.workers;
      opts.class_conditional = class_conditional;
      const auto started = std::chrono::steady_clock::now();
      const auto idx = build_index(session.model, session.data, opts);
      const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
      const auto dir = output_dir(config) / "index";
      idx.save(dir);
      emit({{"command", "index"},
            {"samples", idx.samples},
            {"layers", idx.layers},
            {"targets", idx.targets},
            {"k", idx.k},
            {"seconds", seconds},
            {"outputs", {(dir / "index.crpw").string(), (dir / "index.json").string()}}});
    } else if (references->parsed()) {
      Service svc(open_session(config, data, index_dir), 0);
      json req = {{"target", target}};
      if (cls) req["class"] = *cls;
      if (k) req["k"] = k;
      auto doc = svc.references(layer, channel, req);
      const auto dir = output_dir(config);
      json outputs = json::array();
      for (std::size_t r = 0; r < doc["entries"].size(); ++r) {
        auto& e = doc["entries"][r];
        if (!e.contains("thumbnail")) continue;
        const auto name = "reference_" + std::to_string(r) + "_sample" + std::to_string(e["sample"].get<std::size_t>()) + ".png";
        write_file_bytes(dir / name, base64_decode(e["thumbnail"].get<std::string>()));
        e["thumbnail"] = name;
        outputs.push_back((dir / name).string());
      }
      write_text_file(dir / "references.json", doc.dump(2) + "\n");
      outputs.push_back((dir / "references.json").string());
      doc["command"] = "references";
      doc["outputs"] = outputs;
      emit(doc);
    } else if (atlas->parsed()) {
      const auto ref = parse_sample(sample);
      Service svc(open_session(config, ref.file), 0);
      auto req = sample_request(ref, cls, conds);
      req["layer"] = layer;
      req["top_n"] = top;
      req["density_threshold"] = !no_density;
      if (!regions.empty()) {
        require_file(regions, "region map");
        const auto p = load_partition(regions);
        req["labels"] = std::vector<std::int64_t>(p.labels.begin(), p.labels.end());
      } else {
        req["grid"] = grid.empty() ? "4x4" : grid;
      }
      const auto doc = svc.atlas(req);
      const auto dir = output_dir(config);
      write_text_file(dir / "atlas.json", doc.dump(2) + "\n");
      emit({{"command", "atlas"},
            {"layer", layer},
            {"regions", doc["regions"].size()},
            {"outputs", {(dir / "atlas.json").string()}}});
    } else if (local->parsed()) {
      const auto ref = parse_sample(sample);
      Service svc(open_session(config, ref.file), 0);
      auto req = sample_request(ref, cls, conds);
      req["layer"] = layer;
      if (!rect.empty()) {
        const auto r = parse_rect(rect);
        req["rect"] = {{"top", r[0]}, {"left", r[1]}, {"height", r[2]}, {"width", r[3]}};
      } else if (!mask_path.empty()) {
        require_file(mask_path, "region mask");
        std::vector<int> m;
        if (fs::path(mask_path).extension() == ".png") {
          const auto img = read_indexed_png(mask_path);
          m.assign(img.values.begin(), img.values.end());
        } else {
          const auto& t = read_blob(mask_path).get<IntTensor>("regions");
          m.assign(t.data().begin(), t.data().end());
        }
        req["mask"] = m;
      }
      const auto doc = svc.region(req);
      const auto dir = output_dir(config);
      write_text_file(dir / "local.json", doc.dump(2) + "\n");
      auto summary = doc;
      summary["command"] = "local";
      summary["outputs"] = {(dir / "local.json").string()};
      emit(summary);
    } else if (graph->parsed()) {
      const auto ref = parse_sample(sample);
      Service svc(open_session(config, ref.file), 0);
      auto req = sample_request(ref, cls, conds);
      req["root"] = root;
      if (!layers.empty()) req["layers"] = layers;
      if (k) req["k"] = k;
      req["ascending"] = ascending;
      const auto doc = svc.graph(req);
      const auto dir = output_dir(config);
      write_text_file(dir / "graph.json", doc.dump(2) + "\n");
      emit({{"command", "graph"},
            {"root", root},
            {"nodes", doc["nodes"].size()},
            {"edges", doc["edges"].size()},
            {"outputs", {(dir / "graph.json").string()}}});
    } else if (flip->parsed()) {
      const auto ref = parse_sample(sample);
      const auto session = open_session(config, ref.file);
      const Tensor& x = session.data.sample(ref.index);
      const auto trace = forward(session.model, x);
      const std::size_t target_class = cls ? static_cast<std::size_t>(*cls) : trace.predicted_class();
      RankingSpec spec;
      for (const auto& c : conds) spec.cond.parse_into(c);
      spec.init = InitSpec::logit(target_class);
      spec.rules = session.rules;
      const std::size_t C = session.model.node(layer).out_shape[0];
      const auto curve = flip_filters(session.model, x, layer, target_class, spec, flip_order_from_string(order),
                                      steps ? steps : C, config.seed);
      const auto dir = output_dir(config);
      write_text_file(dir / "flip_curve.csv", curve.to_csv());
      emit({{"command", "flip"},
            {"layer", layer},
            {"class", target_class},
            {"order", to_string(curve.order)},
            {"ranking", curve.ranking},
            {"final_relative", curve.steps.back().relative[target_class]},
            {"outputs", {(dir / "flip_curve.csv").string()}}});
    } else if (blend->parsed()) {
      const auto ref = parse_sample(sample);
      const auto donor_ref = parse_sample(donor);
      auto session = open_session(config, ref.file);
      std::size_t donor_id = donor_ref.index;
      if (fs::weakly_canonical(donor_ref.file) != fs::weakly_canonical(ref.file)) {
        require_file(donor_ref.file, "donor dataset");
        const auto donors = load_dataset(donor_ref.file);
        if (donor_ref.index >= donors.size()) fail(ErrorKind::not_found, "donor sample out of range");
        donor_id = session.data.size() + donor_ref.index;
        session.data = merge_datasets(session.data, ref.file, donors, donor_ref.file);
      }
      Service svc(std::move(session), 0);
      auto req = sample_request(ref, cls, conds);
      req["donor"] = donor_id;
      req["layer"] = layer;
      req["mean"] = mean;
      if (!alphas.empty()) req["alphas"] = alphas;
      if (!tracks.empty()) req["track"] = tracks;
      if (!rect.empty()) {
        const auto r = parse_rect(rect);
        req["rect"] = {{"top", r[0]}, {"left", r[1]}, {"height", r[2]}, {"width", r[3]}};
      }
      const auto doc = svc.blend(req);
      std::ostringstream csv;
      csv.precision(17);
      csv << "alpha";
      const std::size_t outputs_n = doc["points"][0]["logits"].size();
      for (std::size_t i = 0; i < outputs_n; ++i) csv << ",logit_" << i;
      for (const auto& t : doc["tracked"]) csv << ",relevance_" << t.get<std::string>();
      csv << "\n";
      for (const auto& p : doc["points"]) {
        csv << p["alpha"].get<double>();
        for (const auto& v : p["logits"]) csv << "," << v.get<double>();
        for (const auto& v : p["tracked"]) csv << "," << v.get<double>();
        csv << "\n";
      }
      const auto dir = output_dir(config);
      write_text_file(dir / "blend_sweep.csv", csv.str());
      emit({{"command", "blend"},
            {"layer", layer},
            {"mode", doc["mode"]},
            {"points", doc["points"].size()},
            {"outputs", {(dir / "blend_sweep.csv").string()}}});
    } else if (similarity->parsed()) {
      const auto session = open_session(config, data, index_dir);
      const auto m = channel_similarity(session.model, session.data, *session.index, layer, k ? k : 8, target,
                                        config.workers);
      const auto dir = output_dir(config);
      write_text_file(dir / "similarity.csv", m.to_csv(false));
      write_text_file(dir / "distance.csv", m.to_csv(true));
      emit({{"command", "similarity"},
            {"layer", layer},
            {"channels", m.channels},
            {"k", m.k},
            {"flagged", m.flagged},
            {"outputs", {(dir / "similarity.csv").string(), (dir / "distance.csv").string()}}});
    } else if (serve->parsed()) {
      Service svc(open_session(config, data, index_dir), cache_entries);
      std::cerr << "listening on " << bind << ":" << port << "\n";
      run_http_server(svc, bind, port);
    }
    return 0;
  } catch (const Error& e) {
    return report(to_string(e.kind()), e.what(), exit_code(e.kind()));
  } catch (const json::exception& e) {
    return report("format", e.what(), 3);
  } catch (const std::exception& e) {
    return report("compute", e.what(), 4);
  }
}
