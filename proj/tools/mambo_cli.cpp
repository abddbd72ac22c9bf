#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mambo/gradcheck.hpp"
#include "mambo/mambo.hpp"

using namespace mambo;
namespace fs = std::filesystem;

namespace {

// Collects --<key> overrides for every TrainConfig key plus --config.
struct ConfigFlags {
  std::string config_file;
  std::map<std::string, std::string> values;

  void attach(CLI::App* app) {
    app->add_option("--config", config_file, "key = value config file")->check(CLI::ExistingFile);
    for (const auto& key : config_keys()) {
      std::string flag = "--" + key;
      std::replace(flag.begin(), flag.end(), '_', '-');
      app->add_option(flag, values[key], "config key '" + key + "'");
    }
  }

  TrainConfig resolve() const {
    TrainConfig c;
    if (!config_file.empty()) apply_config_file(c, config_file);
    for (const auto& [k, v] : values)
      if (!v.empty()) set_config_value(c, k, v);
    c.validate();
    return c;
  }
};

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::istringstream is(s);
  std::string part;
  while (std::getline(is, part, ',')) out.push_back(std::stoi(part));
  return out;
}

std::vector<double> parse_row(const std::string& s) {
  std::vector<double> out;
  std::istringstream is(s);
  std::string part;
  while (std::getline(is, part, ',')) out.push_back(std::stod(part));
  return out;
}

std::vector<std::vector<double>> parse_rows(const std::string& s) {
  std::vector<std::vector<double>> out;
  std::istringstream is(s);
  std::string part;
  while (std::getline(is, part, ';')) out.push_back(parse_row(part));
  return out;
}

// p_c = a,b ; p_x_given_c = one row per c ; p_y_given_xc = one row per (x, c), x major.
causal::DiscreteScm read_scm(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open " + path.string());
  const auto kv = parse_key_values(is, path.string());
  for (const auto& [k, v] : kv)
    if (k != "p_c" && k != "p_x_given_c" && k != "p_y_given_xc") throw ConfigError("unknown SCM key '" + k + "'");
  for (const char* k : {"p_c", "p_x_given_c", "p_y_given_xc"})
    if (!kv.count(k)) throw ConfigError(std::string("SCM file lacks ") + k);
  causal::DiscreteScm scm;
  scm.p_c = parse_row(kv.at("p_c"));
  scm.p_x_given_c = parse_rows(kv.at("p_x_given_c"));
  const auto rows = parse_rows(kv.at("p_y_given_xc"));
  const std::size_t nc = scm.p_c.size();
  if (nc == 0 || rows.size() % nc) throw ConfigError("p_y_given_xc needs one row per (x, c) pair");
  scm.p_y_given_xc.assign(rows.size() / nc, {});
  for (std::size_t i = 0; i < rows.size(); ++i) scm.p_y_given_xc[i / nc].push_back(rows[i]);
  scm.validate(1e-9);
  return scm;
}

std::string join(const std::vector<double>& v) {
  std::ostringstream os;
  os << std::setprecision(10);
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

Dataset pick_split(const TrainConfig& c, const Dataset& data, const std::string& which) {
  if (which == "all") return data;
  const auto s = split_indices(data.size(), c.split_fraction, *c.seed);
  if (which == "train") return subset(data, s.train);
  if (which == "test") return subset(data, s.test);
  throw ConfigError("split must be train, test or all");
}

Dataset dataset_for(const TrainConfig& c) {
  std::vector<std::string> problems;
  auto data = load_dataset(c, &problems);
  for (const auto& p : problems) std::cerr << "warning: " << p << '\n';
  return data;
}

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  return os;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MAMBO-style confounder-aware segmentation toolkit"};
  app.require_subcommand(1);

  // generate
  int gen_n = 256, gen_size = 64;
  std::uint64_t gen_seed = 0;
  std::string gen_out;
  auto* gen = app.add_subcommand("generate", "write a synthetic confounded dataset as PGM pairs");
  gen->add_option("--n", gen_n, "number of samples");
  gen->add_option("--size", gen_size, "image side length (multiple of 8)");
  gen->add_option("--seed", gen_seed, "generator seed")->required();
  gen->add_option("--out", gen_out, "output directory")->required();

  // ingest-check
  std::string ingest_dir;
  auto* ing = app.add_subcommand("ingest-check", "validate a directory of <stem>.img.pgm / <stem>.mask.pgm pairs");
  ing->add_option("dir", ingest_dir)->required();

  // train
  ConfigFlags train_cfg;
  std::string train_out = "mambo.ckpt", train_metrics = "metrics.csv", train_resume;
  auto* train = app.add_subcommand("train", "train on the training split and write a checkpoint");
  train_cfg.attach(train);
  train->add_option("--out", train_out, "checkpoint path");
  train->add_option("--metrics", train_metrics, "per-epoch metrics CSV");
  train->add_option("--resume", train_resume, "continue from a checkpoint")->check(CLI::ExistingFile);

  // evaluate
  ConfigFlags eval_cfg;
  std::string eval_ckpt, eval_out, eval_split = "test";
  auto* eval = app.add_subcommand("evaluate", "per-image and mean metrics of a checkpoint");
  eval_cfg.attach(eval);
  eval->add_option("--checkpoint", eval_ckpt)->required()->check(CLI::ExistingFile);
  eval->add_option("--split", eval_split, "train, test or all");
  eval->add_option("--out", eval_out, "CSV path (stdout when omitted)");

  // ablate-k
  ConfigFlags ak_cfg;
  std::string ak_ks = "4,16,64", ak_out;
  auto* ak = app.add_subcommand("ablate-k", "train and test once per K");
  ak_cfg.attach(ak);
  ak->add_option("--ks", ak_ks, "comma-separated K values");
  ak->add_option("--out", ak_out, "CSV path (stdout when omitted)");

  // ablate-modules
  ConfigFlags am_cfg;
  std::string am_out;
  auto* am = app.add_subcommand("ablate-modules", "backbone / +gsm / +cibm / +both comparison");
  am_cfg.attach(am);
  am->add_option("--out", am_out, "CSV path (stdout when omitted)");

  // entropy
  ConfigFlags ent_cfg;
  std::string ent_ckpt, ent_dir, ent_split = "test";
  auto* ent = app.add_subcommand("entropy", "write <stem>.entropy.pgm for each image");
  ent_cfg.attach(ent);
  ent->add_option("--checkpoint", ent_ckpt)->required()->check(CLI::ExistingFile);
  ent->add_option("--outdir", ent_dir)->required();
  ent->add_option("--split", ent_split, "train, test or all");

  // gradcheck
  int gc_k = 8, gc_size = 32, gc_probes = 2;
  std::uint64_t gc_seed = 1;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every loss term in 64-bit");
  gc->add_option("--k", gc_k);
  gc->add_option("--size", gc_size);
  gc->add_option("--seed", gc_seed);
  gc->add_option("--probes", gc_probes, "probes per parameter tensor and loss");

  // oracle
  std::string or_scm;
  std::size_t or_x = 1;
  auto* orc = app.add_subcommand("oracle", "exact interventional distributions of a discrete SCM");
  orc->add_option("--scm", or_scm, "SCM file (worked example when omitted)")->check(CLI::ExistingFile);
  orc->add_option("--x", or_x, "treatment value");

  // inspect-band
  std::string band_mask, band_out;
  int band_width = 2;
  auto* band = app.add_subcommand("inspect-band", "boundary band of a mask");
  band->add_option("--mask", band_mask)->required()->check(CLI::ExistingFile);
  band->add_option("--width", band_width);
  band->add_option("--out", band_out, "band PGM path");

  // inspect-omega
  ConfigFlags om_cfg;
  std::string om_ckpt, om_out;
  auto* om = app.add_subcommand("inspect-omega", "per-stage mixing matrices as CSV");
  om_cfg.attach(om);
  om->add_option("--checkpoint", om_ckpt)->required()->check(CLI::ExistingFile);
  om->add_option("--out", om_out, "CSV path (stdout when omitted)");

  CLI11_PARSE(app, argc, argv);

  auto sink = [](const std::string& path, const std::function<void(std::ostream&)>& write) {
    if (path.empty()) {
      write(std::cout);
    } else {
      auto os = open_out(path);
      write(os);
    }
  };

  try {
    if (gen->parsed()) {
      const auto data = generate_synthetic(gen_n, gen_size, gen_seed);
      export_dataset(data, gen_out);
      std::cout << "wrote " << data.size() << " pairs to " << gen_out << '\n';
    } else if (ing->parsed()) {
      const auto r = ingest(ingest_dir);
      for (const auto& e : r.errors) std::cerr << "error: " << e << '\n';
      for (const auto& w : r.warnings) std::cerr << "warning: " << w << '\n';
      std::cout << r.samples.size() << " valid pairs, " << r.errors.size() << " errors\n";
      return r.errors.empty() ? 0 : 1;
    } else if (train->parsed()) {
      const auto c = train_cfg.resolve();
      if (!c.seed) throw ConfigError("train requires --seed");
      const auto data = dataset_for(c);
      const auto split = split_indices(data.size(), c.split_fraction, *c.seed);
      const auto train_set = subset(data, split.train);
      Trainer t(c);
      const bool append = !train_resume.empty();
      if (append) t.resume(load_checkpoint(train_resume));
      std::ofstream csv(train_metrics, append ? std::ios::app : std::ios::trunc);
      if (!csv) throw std::runtime_error("cannot write " + train_metrics);
      if (!append) csv << kMetricsCsvHeader << '\n';
      t.fit(train_set, [&](const EpochRecord& r) {
        write_csv_row(csv, r);
        csv.flush();
        std::cout << "epoch " << r.epoch << " loss " << r.loss_total << " dice " << r.metrics.dice << '\n';
      });
      save_checkpoint(train_out, t.checkpoint());
      const auto ev = evaluate(t.model(), subset(data, split.test), c.stochastic_inference, *c.seed);
      std::cout << "test dice " << ev.mean.dice << " iou " << ev.mean.iou << " fdr " << ev.mean.fdr << " auc "
                << ev.mean.auc << "\ncheckpoint " << train_out << '\n';
    } else if (eval->parsed()) {
      const auto c = eval_cfg.resolve();
      if (!c.seed && eval_split != "all") throw ConfigError("--seed is needed to reproduce the split");
      const auto model = load_model(load_checkpoint(eval_ckpt), c.model());
      const auto ev = evaluate(*model, pick_split(c, dataset_for(c), eval_split), c.stochastic_inference,
                               c.seed.value_or(0));
      if (ev.undefined_auc) std::cerr << "note: AUC undefined (single class) for " << ev.undefined_auc << " images\n";
      sink(eval_out, [&](std::ostream& os) { write_evaluation_csv(os, ev); });
    } else if (ak->parsed()) {
      const auto c = ak_cfg.resolve();
      if (!c.seed) throw ConfigError("ablate-k requires --seed");
      const auto rows = ablate_k(c, parse_int_list(ak_ks), dataset_for(c));
      sink(ak_out, [&](std::ostream& os) { write_ablation_csv(os, "K", rows); });
    } else if (am->parsed()) {
      const auto c = am_cfg.resolve();
      if (!c.seed) throw ConfigError("ablate-modules requires --seed");
      const auto rows = ablate_modules(c, dataset_for(c));
      sink(am_out, [&](std::ostream& os) { write_ablation_csv(os, "Method", rows); });
    } else if (ent->parsed()) {
      const auto c = ent_cfg.resolve();
      if (!c.seed && ent_split != "all") throw ConfigError("--seed is needed to reproduce the split");
      const auto model = load_model(load_checkpoint(ent_ckpt), c.model());
      const auto files = emit_entropy_maps(*model, pick_split(c, dataset_for(c), ent_split), ent_dir);
      std::cout << "wrote " << files.size() << " entropy maps to " << ent_dir << '\n';
    } else if (gc->parsed()) {
      ModelConfig mc;
      mc.components = gc_k;
      MamboNet<double> net(mc, gc_seed);
      const auto data = generate_synthetic(2, gc_size, gc_seed + 1);
      auto images = to_tensor<double>({&data[0].image, &data[1].image});
      auto masks = to_tensor<double>({&data[0].mask, &data[1].mask});
      NoiseSource first(gc_seed + 2);
      net.forward(images, &masks, Mode::train, first);
      const auto frozen = first.recorded();
      const char* names[] = {"bce", "dice", "kl", "usd", "total"};
      double worst = 0;
      for (int part = 0; part < 5; ++part) {
        auto f = [&] {
          auto noise = NoiseSource::replay(frozen);
          auto b = net.losses(net.forward(images, &masks, Mode::train, noise), masks);
          const Tensor<double>* parts[] = {&b.bce, &b.dice, &b.kl, &b.usd, &b.total};
          return *parts[part];
        };
        double part_worst = 0;
        const auto params = net.parameters().all();
        for (std::size_t i = 0; i < params.size(); ++i)
          part_worst = std::max(part_worst,
                                finite_diff_check<double>(f, {params[i]}, 1e-6, gc_probes, 100 + i).max_rel_error);
        worst = std::max(worst, part_worst);
        std::cout << names[part] << " max_rel_error " << part_worst << '\n';
      }
      return worst <= 1e-4 ? 0 : 1;
    } else if (orc->parsed()) {
      const auto scm = or_scm.empty() ? causal::worked_example() : read_scm(or_scm);
      std::cout << std::setprecision(10);
      std::cout << "observational P(Y|X=" << or_x << ") " << join(causal::observational(scm, or_x)) << '\n';
      std::cout << "backdoor      P(Y|do(X=" << or_x << ")) " << join(causal::backdoor_adjust(scm, or_x)) << '\n';
      std::cout << "enumerated    P(Y|do(X=" << or_x << ")) " << join(causal::intervene_enumerate(scm, or_x)) << '\n';
      std::cout << "confounding bias (TV) "
                << causal::total_variation(causal::observational(scm, or_x), causal::backdoor_adjust(scm, or_x))
                << '\n';
      std::cout << "approximation gap (TV) " << causal::approximation_gap(scm, or_x) << '\n';
    } else if (band->parsed()) {
      auto mask = read_pgm(band_mask);
      for (auto& v : mask.data) v = v >= 0.5 ? 1.0 : 0.0;
      const auto b = boundary_band(mask, band_width);
      std::cout << "band pixels " << b.count << " of " << mask.size() << '\n';
      if (!band_out.empty()) {
        Raster r(b.height, b.width);
        for (std::size_t i = 0; i < r.size(); ++i) r.data[i] = b.band[i];
        write_pgm(band_out, r);
      }
    } else if (om->parsed()) {
      const auto c = om_cfg.resolve();
      if (!c.use_cibm) throw ConfigError("inspect-omega needs use_cibm = true");
      const auto model = load_model(load_checkpoint(om_ckpt), c.model());
      sink(om_out, [&](std::ostream& os) {
        os << "stage,channel";
        for (int k = 0; k < c.components; ++k) os << ",k" << k;
        os << '\n' << std::setprecision(8);
        const auto& cibm = model->cibm();
        for (std::size_t s = 0; s < cibm.stages(); ++s) {
          const auto omega = cibm.weights(s).omega();
          for (int r = 0; r < omega.dim(0); ++r) {
            os << s << ',' << r;
            for (int k = 0; k < omega.dim(1); ++k) os << ',' << omega[r * omega.dim(1) + k];
            os << '\n';
          }
        }
      });
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
