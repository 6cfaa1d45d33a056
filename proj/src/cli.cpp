#include "sepdrop/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include <CLI11.hpp>

#include "sepdrop/allocator.hpp"
#include "sepdrop/trainer.hpp"

namespace sepdrop {

namespace fs = std::filesystem;

namespace {

struct CliFailure : std::runtime_error {
  CliFailure(std::string k, const std::string& msg, int c) : std::runtime_error(msg), kind(std::move(k)), code(c) {}
  std::string kind;
  int code;
};

// 0.990741, 1.0, 0.5
std::string probability(double p) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", p);
  std::string s = buf;
  while (s.size() > 1 && s.back() == '0' && s[s.size() - 2] != '.') s.pop_back();
  return s;
}

std::string join_doubles(const std::vector<double>& v) {
  std::ostringstream os;
  os << std::setprecision(17);
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

std::vector<double> split_doubles(const std::string& s) {
  std::vector<double> out;
  std::istringstream is(s);
  std::string item;
  while (std::getline(is, item, ',')) out.push_back(std::stod(item));
  return out;
}

struct Datasets {
  LabeledImageSet train;
  std::optional<LabeledImageSet> test;
};

Datasets load_datasets(const RunConfig& cfg, bool need_train) {
  Datasets d;
  if (cfg.dataset == DatasetKind::Synthetic) {
    SyntheticOptions opt;
    opt.signal = cfg.synthetic_signal;
    opt.noise = cfg.synthetic_noise;
    d.train = synthesize_dataset(cfg.synthetic_classes, cfg.synthetic_train, cfg.image_size, cfg.seed, opt, Split::Train);
    if (cfg.synthetic_test > 0)
      d.test = synthesize_dataset(cfg.synthetic_classes, cfg.synthetic_test, cfg.image_size, cfg.seed, opt, Split::Test);
    return d;
  }
  const int classes = cfg.num_classes();
  if (need_train) d.train = load_cifar_dataset(cfg.data_dir, classes, Split::Train);
  d.test = load_cifar_dataset(cfg.data_dir, classes, Split::Test);
  return d;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw CliFailure("io", "cannot write " + path.string(), kExitRuntimeError);
  out << text;
}

// Keeps the header and the rows of epochs before `epoch`.
std::string truncated_metrics(const fs::path& path, int epoch, const std::string& header) {
  std::ifstream in(path);
  std::string text = header + "\n";
  if (!in) return text;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (std::stoi(line.substr(0, line.find(','))) < epoch) text += line + "\n";
  }
  return text;
}

int cmd_train(const RunConfig& cfg, std::ostream& out) {
  const Datasets data = load_datasets(cfg, true);
  PreprocessSpec pre = compute_preprocess(data.train);
  pre.random_crop = pre.horizontal_flip = cfg.augment;

  const fs::path dir = cfg.out_dir;
  fs::create_directories(dir);
  write_text(dir / "config.txt", to_text(cfg));
  write_preprocess_manifest(pre, dir / "preprocess.txt");

  TrainerOptions options;
  options.eval_every = cfg.eval_every;
  Trainer<float> trainer(cfg.train_config(), data.train, data.test ? &*data.test : nullptr, pre, options);

  const bool with_models = cfg.models > 1;
  const std::string header = metrics_header(with_models);
  const fs::path metrics_path = dir / "metrics.csv";
  if (!cfg.resume.empty()) {
    trainer.restore(read_checkpoint(cfg.resume));
    write_text(metrics_path, truncated_metrics(metrics_path, trainer.epochs_completed(), header));
    out << "resumed from " << cfg.resume << " at epoch " << trainer.epochs_completed() << "\n";
  } else {
    write_text(metrics_path, header + "\n");
  }

  auto save = [&](const fs::path& path) {
    Checkpoint ckpt = trainer.checkpoint();
    ckpt.meta["norm_mean"] = join_doubles(pre.mean);
    ckpt.meta["norm_std"] = join_doubles(pre.stddev);
    write_checkpoint(ckpt, path);
  };

  out << header << "\n";
  std::ofstream metrics(metrics_path, std::ios::app);
  while (trainer.epochs_completed() < cfg.epochs) {
    const EpochMetrics m = trainer.train_epoch();
    const std::string row = format_metrics_row(m, with_models);
    metrics << row << "\n" << std::flush;
    out << row << "\n" << std::flush;
    const int done = trainer.epochs_completed();
    if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.epochs) {
      char name[64];
      std::snprintf(name, sizeof name, "checkpoint-%04d.ckpt", done);
      save(dir / name);
    }
  }
  save(dir / "final.ckpt");
  out << "wrote " << (dir / "final.ckpt").string() << "\n";
  return kExitOk;
}

int cmd_eval(const RunConfig& cfg, std::ostream& out) {
  if (cfg.checkpoint.empty()) throw ConfigError("eval needs --checkpoint");
  const Checkpoint ckpt = read_checkpoint(cfg.checkpoint);
  if (ckpt.spec.num_classes != cfg.num_classes())
    throw ConfigError("checkpoint has " + std::to_string(ckpt.spec.num_classes) + " classes but the dataset has " +
                      std::to_string(cfg.num_classes()));
  const bool stored_stats = ckpt.meta.count("norm_mean") && ckpt.meta.count("norm_std");
  const Datasets data = load_datasets(cfg, !stored_stats || cfg.dataset == DatasetKind::Synthetic);
  if (!data.test) throw ConfigError("eval needs a test split (synthetic_test > 0)");
  PreprocessSpec pre;
  if (stored_stats) {
    pre.mean = split_doubles(ckpt.meta.at("norm_mean"));
    pre.stddev = split_doubles(ckpt.meta.at("norm_std"));
  } else {
    pre = compute_preprocess(data.train);
  }
  Network<float> net(ckpt.spec);
  restore_network(ckpt, net);
  const double err = evaluate(net, normalize(*data.test, pre));
  out << "epoch=" << ckpt.epoch << " test_err=" << std::setprecision(6) << err << "\n";
  return kExitOk;
}

int cmd_gradcheck(const RunConfig& cfg, std::ostream& out, std::ostream& err, const CliHooks& hooks) {
  if (cfg.depth > kGradcheckMaxDepth)
    throw ConfigError("depth " + std::to_string(cfg.depth) + " is too large for gradcheck (at most " +
                      std::to_string(kGradcheckMaxDepth) + ")");
  GradcheckOptions layer;  // 64-bit, every element, floor 1e-3
  GradcheckOptions network;
  network.floor = 5e-2;  // ~4x the float central-difference noise eps * |L| / step
  network.max_coordinates = cfg.gradcheck_coordinates;
  network.skip_kinks = true;
  network.seed = cfg.seed + 7;
  auto components = standard_gradcheck_components(cfg.network_spec(), layer, 1e-3, network, 1e-2);
  components.insert(components.end(), hooks.extra_gradcheck.begin(), hooks.extra_gradcheck.end());

  out << "component,max_rel_error,tolerance,checked,skipped,status\n";
  std::vector<std::string> failed;
  for (const auto& c : components) {
    const GradcheckResult r = c.run();
    char line[256];
    std::snprintf(line, sizeof line, "%s,%.3e,%.0e,%lld,%lld,%s", r.component.c_str(), r.max_rel_error, r.tolerance,
                  static_cast<long long>(r.checked), static_cast<long long>(r.skipped), r.passed() ? "pass" : "FAIL");
    out << line << "\n" << std::flush;
    if (!r.passed()) failed.push_back(r.component);
  }
  if (failed.empty()) return kExitOk;
  std::string names;
  for (const auto& f : failed) names += (names.empty() ? "" : ",") + f;
  err << "error kind=verification message=gradient check failed for component " << names << "\n";
  return kExitVerificationFailed;
}

}  // namespace

std::string inspect_report(const NetworkSpec& spec, const std::string& format) {
  const auto blocks = block_specs_for(spec);
  const ChannelSchedule widths = channel_schedule_for(spec);
  std::ostringstream os;
  os << std::setprecision(10);
  if (format == "csv") {
    os << "# variant=" << to_string(spec.variant) << " depth=" << spec.depth << " alpha=" << spec.alpha
       << " blocks=" << spec.block_count() << " final_width=" << widths.final_width()
       << " parameters=" << parameter_count(spec) << "\n";
    os << "block,stage,in_channels,out_channels,stride,survival\n";
    for (std::size_t i = 0; i < blocks.size(); ++i)
      os << i + 1 << "," << i / spec.blocks_per_stage() + 1 << "," << blocks[i].in_channels << "," << blocks[i].out_channels
         << "," << blocks[i].stride << "," << probability(blocks[i].survival) << "\n";
    return os.str();
  }
  os << "variant      " << to_string(spec.variant) << "\n"
     << "depth        " << spec.depth << "\n"
     << "alpha        " << spec.alpha << "\n"
     << "blocks       " << spec.block_count() << " (" << spec.blocks_per_stage() << " per stage)\n"
     << "p_last       " << probability(spec.p_last) << "\n"
     << "final width  " << widths.final_width() << "\n"
     << "classes      " << spec.num_classes << "\n"
     << "parameters   " << parameter_count(spec) << "\n\n"
     << " block  stage     in    out  stride  survival\n";
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    char line[96];
    std::snprintf(line, sizeof line, "%6zu %6d %6d %6d %7d  %s\n", i + 1, int(i) / spec.blocks_per_stage() + 1,
                  blocks[i].in_channels, blocks[i].out_channels, blocks[i].stride, probability(blocks[i].survival).c_str());
    os << line;
  }
  return os.str();
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err, const CliHooks& hooks) {
  retain_freed_memory();
  auto fail = [&](const std::string& kind, const std::string& message, int code) {
    err << "error kind=" << kind << " message=" << message << "\n";
    return code;
  };

  CLI::App app{"PyramidSepDrop residual networks: train, evaluate, inspect, gradient-check"};
  app.name("sepdrop");
  app.require_subcommand(1);
  std::string config_path;
  std::map<std::string, std::string> overrides;
  std::vector<CLI::App*> commands;
  const std::pair<const char*, const char*> subcommands[] = {
      {"train", "run the epoch loop; writes config, metrics and checkpoints to --out-dir"},
      {"eval", "test error of --checkpoint"},
      {"inspect", "channel and survival schedule of a spec (--format text|csv)"},
      {"gradcheck", "finite-difference gradient checks (depth <= 14)"},
  };
  for (const auto& [name, description] : subcommands) {
    CLI::App* sub = app.add_subcommand(name, description);
    sub->add_option("--config", config_path, "key=value config file");
    for (const std::string& key : run_config_keys()) {
      std::string flag = key;
      std::replace(flag.begin(), flag.end(), '_', '-');
      sub->add_option_function<std::string>("--" + flag, [&overrides, key](const std::string& v) { overrides[key] = v; });
    }
    commands.push_back(sub);
  }

  std::vector<std::string> argv_storage{"sepdrop"};
  argv_storage.insert(argv_storage.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : argv_storage) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    return fail("config", e.what(), kExitConfigError);
  }

  std::string command;
  for (CLI::App* c : commands)
    if (c->parsed()) command = c->get_name();

  try {
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    // Flags override the file in a fixed key order, independent of their
    // position on the command line.
    for (const auto& key : run_config_keys())
      if (auto it = overrides.find(key); it != overrides.end()) apply_setting(cfg, key, it->second);
    resolve(cfg);

    if (command == "inspect") {
      out << inspect_report(cfg.network_spec(), cfg.format);
      return kExitOk;
    }
    if (command == "gradcheck") return cmd_gradcheck(cfg, out, err, hooks);
    if (command == "eval") return cmd_eval(cfg, out);
    return cmd_train(cfg, out);
  } catch (const CliFailure& e) {
    return fail(e.kind, e.what(), e.code);
  } catch (const ConfigError& e) {
    return fail("config", e.what(), kExitConfigError);
  } catch (const NonFiniteLossError& e) {
    return fail("numeric", e.what(), kExitRuntimeError);
  } catch (const DataError& e) {
    return fail("data", e.what(), kExitRuntimeError);
  } catch (const CheckpointError& e) {
    return fail("io", e.what(), kExitRuntimeError);
  } catch (const fs::filesystem_error& e) {
    return fail("io", e.what(), kExitRuntimeError);
  } catch (const std::exception& e) {
    return fail("runtime", e.what(), kExitRuntimeError);
  }
}

}  // namespace sepdrop
