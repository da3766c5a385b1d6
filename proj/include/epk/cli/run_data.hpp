#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "epk/attack/attacks.hpp"
#include "epk/data/dataset.hpp"
#include "epk/data/mnist.hpp"
#include "epk/data/projection.hpp"
#include "epk/error.hpp"
#include "epk/numerics/rng.hpp"

namespace epk::cli {

/// Root-seed streams, one per subsystem.
enum class Stream : std::uint64_t { data = 0, train = 1, attack = 2, geometry = 3, decompose = 4 };

inline Rng stream(std::uint64_t seed, Stream s) { return Rng(seed).split(static_cast<std::uint64_t>(s)); }

struct DataOptions {
  std::string kind = "toy";  ///< toy | mnist | csv
  std::size_t per_class = 100;
  std::size_t dim = 100;
  double noise = 1.0;
  std::size_t n_train = 1000;  ///< mnist only
  std::size_t n_test = 100;
  std::string mnist_dir = "data/mnist-subset";
  std::string train_csv;
  std::string test_csv;
  std::size_t project = 0;  ///< > 0: project both splits onto the top principal components of train
};

inline nlohmann::json to_json(const DataOptions& o) {
  return {{"kind", o.kind},           {"per_class", o.per_class}, {"dim", o.dim},
          {"noise", o.noise},         {"n_train", o.n_train},     {"n_test", o.n_test},
          {"mnist_dir", o.mnist_dir}, {"train_csv", o.train_csv}, {"test_csv", o.test_csv},
          {"project", o.project}};
}

inline DataOptions data_options_from_json(const nlohmann::json& j) {
  DataOptions o;
  o.kind = j.at("kind").get<std::string>();
  o.per_class = j.at("per_class").get<std::size_t>();
  o.dim = j.at("dim").get<std::size_t>();
  o.noise = j.at("noise").get<double>();
  o.n_train = j.at("n_train").get<std::size_t>();
  o.n_test = j.at("n_test").get<std::size_t>();
  o.mnist_dir = j.at("mnist_dir").get<std::string>();
  o.train_csv = j.at("train_csv").get<std::string>();
  o.test_csv = j.at("test_csv").get<std::string>();
  o.project = j.at("project").get<std::size_t>();
  return o;
}

struct Splits {
  Dataset train;
  Dataset test;
  Matrix components;  ///< k×d projection basis, empty unless project > 0
};

namespace detail {

/// Round-robin over classes so that any prefix of the split is balanced.
inline Dataset interleave_classes(const Dataset& ds) {
  std::vector<std::vector<std::size_t>> by_class(ds.classes());
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);
  std::vector<std::size_t> order;
  for (std::size_t r = 0; order.size() < ds.size(); ++r)
    for (const auto& c : by_class)
      if (r < c.size()) order.push_back(c[r]);
  return subset(ds, order);
}

}  // namespace detail

inline Splits load_splits(const DataOptions& o, std::uint64_t seed) {
  Splits s;
  if (o.kind == "toy") {
    const Rng rng = stream(seed, Stream::data);
    Rng r_train = rng.split(0), r_test = rng.split(1);
    s.train = toy_dataset(r_train, o.per_class, o.dim, o.noise);
    s.test = head(detail::interleave_classes(toy_dataset(r_test, (o.n_test + 2) / 3, o.dim, o.noise)), o.n_test);
  } else if (o.kind == "mnist") {
    const std::filesystem::path dir(o.mnist_dir);
    s.train = head(load_mnist_idx((dir / "train-images-idx3-ubyte.gz").string(), (dir / "train-labels-idx1-ubyte.gz").string()),
                   o.n_train);
    s.test = head(load_mnist_idx((dir / "t10k-images-idx3-ubyte.gz").string(), (dir / "t10k-labels-idx1-ubyte.gz").string()),
                  o.n_test);
  } else if (o.kind == "csv") {
    if (o.train_csv.empty() || o.test_csv.empty()) throw InvalidInput("dataset csv needs --train-csv and --test-csv");
    s.train = read_dataset_csv(o.train_csv);
    s.test = head(read_dataset_csv(o.test_csv, s.train.classes()), o.n_test);
  } else {
    throw InvalidInput("unknown dataset '" + o.kind + "' (toy, mnist, csv)");
  }
  if (o.project > 0) {
    ProjectedPair p = make_projected_pair(s.train, s.test, o.project);
    s.train = std::move(p.train);
    s.test = std::move(p.test);
    s.components = std::move(p.pca.components);
  }
  return s;
}

/// Pixel datasets live in [0, 1]; everything else is unconstrained.
inline Box default_box(const DataOptions& o) { return o.kind == "mnist" ? Box{} : Box::none(); }

/// Written next to a training path so later commands rebuild exactly the same splits.
inline nlohmann::json data_record(const DataOptions& o, std::uint64_t seed, const Splits& s) {
  return {{"data", to_json(o)},
          {"seed", seed},
          {"train_fingerprint", hex64(fingerprint(s.train))},
          {"test_fingerprint", hex64(fingerprint(s.test))}};
}

struct RunData {
  DataOptions options;
  std::uint64_t seed = 0;
  Splits splits;
  std::string fingerprint;  ///< of the training split
};

/// Rebuilds the splits recorded in data.json and checks them against the stored fingerprints.
inline RunData reload_run_data(const nlohmann::json& record) {
  RunData r;
  r.options = data_options_from_json(record.at("data"));
  r.seed = record.at("seed").get<std::uint64_t>();
  r.splits = load_splits(r.options, r.seed);
  r.fingerprint = hex64(fingerprint(r.splits.train));
  if (r.fingerprint != record.at("train_fingerprint").get<std::string>() ||
      hex64(fingerprint(r.splits.test)) != record.at("test_fingerprint").get<std::string>())
    throw InvalidInput("dataset differs from the one the model was trained on");
  return r;
}

}  // namespace epk::cli
