#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "surgpis/labels/io.hpp"
#include "surgpis/pipeline/pipeline.hpp"

using namespace surgpis;

namespace {

// relative output paths land under $SURGPIS_OUT when it is set
std::string out_path(const std::string& p) {
  if (p.empty()) return p;
  const char* root = std::getenv("SURGPIS_OUT");
  if (!root || std::filesystem::path(p).is_absolute()) return p;
  return std::string(root) + "/" + p;
}

std::map<Granularity, double> parse_mix(const std::string& spec) {
  std::map<Granularity, double> mix;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    size_t eq = item.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("mix entry '" + item + "' is not name=weight");
    std::string name = item.substr(0, eq);
    for (char& c : name) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    mix[granularity_from_name(name)] = std::stod(item.substr(eq + 1));
  }
  return mix;
}

RunConfig resolve_config(const std::string& config_file, const std::vector<std::string>& sets,
                         const std::string& train_manifest) {
  RunConfig cfg = parse_run_config(config_file);
  apply_overrides(cfg, sets);
  if (!train_manifest.empty()) cfg.train_manifest = train_manifest;
  cfg.check();
  return cfg;
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << content;
}

int run(int argc, char** argv) {
  CLI::App app{"part-aware instrument instance segmentation toolkit"};
  app.require_subcommand(1);

  // --- data generate ---
  auto* data = app.add_subcommand("data", "synthetic dataset tools")->require_subcommand(1);
  auto* gen = data->add_subcommand("generate", "generate a synthetic dataset");
  std::string gen_out, gen_split = "train", gen_mix = "pis=1.0";
  int gen_n = 16;
  SceneSpec spec;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--n", gen_n, "number of scenes");
  gen->add_option("--split", gen_split, "split name");
  gen->add_option("--mix", gen_mix, "granularity weights, e.g. pis=0.25,iis=0.375,pss=0.375");
  gen->add_option("--height", spec.h);
  gen->add_option("--width", spec.w);
  gen->add_option("--min-instruments", spec.min_instruments);
  gen->add_option("--max-instruments", spec.max_instruments);
  gen->add_option("--seed", spec.seed);

  // --- labels validate / convert ---
  auto* labels = app.add_subcommand("labels", "label inspection tools")->require_subcommand(1);
  auto* validate = labels->add_subcommand("validate", "check a record directory");
  std::string val_dir;
  validate->add_option("dir", val_dir, "record directory")->required();
  auto* convert = labels->add_subcommand("convert", "convert a PIS record to IIS or PSS");
  std::string conv_dir, conv_to, conv_out;
  convert->add_option("dir", conv_dir, "PIS record directory")->required();
  convert->add_option("--to", conv_to, "target granularity: iis | pss")->required();
  convert->add_option("--out", conv_out, "output record directory")->required();

  // --- train ---
  auto* train = app.add_subcommand("train", "training stages")->require_subcommand(1);
  std::string tr_config, tr_manifest, tr_out, tr_log, tr_init;
  std::vector<std::string> tr_sets;
  for (auto* st : {train->add_subcommand("stage1", "fully supervised stage"),
                   train->add_subcommand("stage2", "weakly supervised stage")}) {
    st->add_option("--config", tr_config, "config file");
    st->add_option("--set", tr_sets, "config overrides key=value");
    st->add_option("--train-manifest", tr_manifest, "training manifest path");
    st->add_option("--out", tr_out, "checkpoint output directory")->required();
    st->add_option("--log", tr_log, "JSONL loss log path");
    st->add_option("--init", tr_init, "initial checkpoint directory");
  }
  train->get_subcommand("stage2")->get_option("--init")->required();

  // --- eval ---
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a manifest");
  std::string ev_ckpt, ev_manifest, ev_json, ev_csv, ev_plot;
  double ev_conf = 0.5;
  eval_cmd->add_option("--ckpt", ev_ckpt, "checkpoint directory")->required();
  eval_cmd->add_option("--manifest", ev_manifest, "dataset manifest")->required();
  eval_cmd->add_option("--out-json", ev_json, "write report JSON here");
  eval_cmd->add_option("--out-csv", ev_csv, "write report CSV here");
  eval_cmd->add_option("--out-plot", ev_plot, "write report plot PNG here");
  eval_cmd->add_option("--conf", ev_conf, "confidence threshold");

  // --- infer ---
  auto* infer_cmd = app.add_subcommand("infer", "run inference on images");
  std::string in_ckpt, in_out;
  std::vector<std::string> in_images;
  double in_conf = 0.5;
  infer_cmd->add_option("--ckpt", in_ckpt, "checkpoint directory")->required();
  infer_cmd->add_option("--out", in_out, "output directory")->required();
  infer_cmd->add_option("images", in_images, "input PNG images")->required();
  infer_cmd->add_option("--conf", in_conf, "confidence threshold");

  // --- report plot ---
  auto* report = app.add_subcommand("report", "report tools")->require_subcommand(1);
  auto* plot = report->add_subcommand("plot", "bar chart from a report JSON");
  std::string rp_json, rp_out;
  plot->add_option("--json", rp_json, "report JSON file")->required();
  plot->add_option("--out", rp_out, "output PNG")->required();

  CLI11_PARSE(app, argc, argv);

  if (gen->parsed()) {
    spec.check();
    DatasetManifest m =
        generate_dataset(spec, gen_n, parse_mix(gen_mix), out_path(gen_out), gen_split);
    std::cout << nlohmann::json{{"manifest", out_path(gen_out) + "/manifest.json"},
                                {"records", m.records.size()}}
                     .dump()
              << "\n";
    return 0;
  }

  if (validate->parsed()) {
    AnyRecord rec = load_record(val_dir);
    nlohmann::json j{{"granularity", granularity_name(detect_granularity(val_dir))}};
    nlohmann::json violations = nlohmann::json::array();
    if (const PisRecord* pis = std::get_if<PisRecord>(&rec)) {
      for (const auto& v : validate_pis(*pis).violations)
        violations.push_back({{"kind", v.kind}, {"detail", v.detail}, {"pixels", v.pixel_count}});
    }
    j["violations"] = violations;
    j["valid"] = violations.empty();
    std::cout << j.dump(2) << "\n";
    return violations.empty() ? 0 : 1;
  }

  if (convert->parsed()) {
    PisRecord pis = load_pis(conv_dir);
    ImageF img = load_image_png(conv_dir + "/image.png");
    if (conv_to == "iis")
      store_record(pis_to_iis(pis), img, out_path(conv_out));
    else if (conv_to == "pss")
      store_record(pis_to_pss(pis), img, out_path(conv_out));
    else
      throw std::invalid_argument("unknown conversion target '" + conv_to + "'");
    return 0;
  }

  for (int stage : {1, 2}) {
    auto* st = train->get_subcommand(stage == 1 ? "stage1" : "stage2");
    if (!st->parsed()) continue;
    RunConfig cfg = resolve_config(tr_config, tr_sets, tr_manifest);
    if (cfg.train_manifest.empty())
      throw std::invalid_argument("no training manifest (data.train_manifest or --train-manifest)");
    DatasetManifest m = load_manifest(cfg.train_manifest);
    Checkpoint init;
    bool have_init = !tr_init.empty();
    if (have_init) init = load_checkpoint(tr_init);
    TrainResult res =
        stage == 1
            ? train_stage1(cfg, m, have_init ? &init : nullptr, out_path(tr_out), out_path(tr_log))
            : train_stage2(cfg, m, init, out_path(tr_out), out_path(tr_log));
    std::cout << nlohmann::json{{"checkpoint", out_path(tr_out)},
                                {"iterations", res.ckpt.optim ? res.ckpt.optim->step : 0},
                                {"final_loss", res.log.empty() ? 0.0 : res.log.back().total}}
                     .dump()
              << "\n";
    return 0;
  }

  if (eval_cmd->parsed()) {
    Checkpoint ckpt = load_checkpoint(ev_ckpt);
    Model model(ckpt.config);
    EvalResult r = evaluate(model, ckpt.params, load_manifest(ev_manifest), ev_conf);
    std::string json = eval_to_json(r);
    if (!ev_json.empty()) write_file(out_path(ev_json), json);
    if (!ev_csv.empty()) write_file(out_path(ev_csv), eval_to_csv(r));
    if (!ev_plot.empty()) eval_plot_from_json(json, out_path(ev_plot));
    std::cout << json << "\n";
    return 0;
  }

  if (infer_cmd->parsed()) {
    Checkpoint ckpt = load_checkpoint(in_ckpt);
    Model model(ckpt.config);
    std::vector<std::string> dirs =
        infer(model, ckpt.params, in_images, out_path(in_out), in_conf);
    std::cout << nlohmann::json{{"outputs", dirs}}.dump() << "\n";
    return 0;
  }

  if (plot->parsed()) {
    std::ifstream in(rp_json);
    if (!in) throw std::runtime_error("cannot read " + rp_json);
    std::stringstream buf;
    buf << in.rdbuf();
    eval_plot_from_json(buf.str(), out_path(rp_out));
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << nlohmann::json{{"error", e.what()}}.dump() << "\n";
    return 1;
  }
}
