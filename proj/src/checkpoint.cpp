#include "dadapt/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "dadapt/errors.hpp"
#include "dadapt/rng.hpp"

namespace dadapt {

namespace {

constexpr int kCheckpointVersion = 1;

std::uint64_t payload_checksum(const std::vector<double>& values) {
  return fnv1a64(values.data(), values.size() * sizeof(double));
}

std::string to_hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

void save_params(const ad::ParamStore& store, const std::string& path) {
  nlohmann::ordered_json j;
  j["format"] = "dadapt-checkpoint";
  j["version"] = kCheckpointVersion;
  auto params = nlohmann::ordered_json::array();
  std::vector<double> payload;
  for (const auto& e : store.entries()) {
    if (!e.value.allFinite())
      throw IntegrityError("refusing to save non-finite parameter '" + e.name + "'");
    nlohmann::ordered_json p;
    p["name"] = e.name;
    p["shape"] = {e.value.rows(), e.value.cols()};
    auto data = nlohmann::ordered_json::array();
    for (long r = 0; r < e.value.rows(); ++r)
      for (long c = 0; c < e.value.cols(); ++c) {
        data.push_back(e.value(r, c));
        payload.push_back(e.value(r, c));
      }
    p["data"] = std::move(data);
    params.push_back(std::move(p));
  }
  j["params"] = std::move(params);
  j["checksum"] = to_hex(payload_checksum(payload));

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint '" + path + "'");
  out << j.dump() << "\n";
  if (!out) throw IoError("failed writing checkpoint '" + path + "'");
}

namespace {

nlohmann::json parse_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError("checkpoint '" + path + "' is not valid: " + e.what());
  }
  if (j.value("format", "") != "dadapt-checkpoint")
    throw IntegrityError("'" + path + "' is not a checkpoint file");
  if (j.value("version", -1) != kCheckpointVersion)
    throw IntegrityError("checkpoint version mismatch in '" + path + "'");
  return j;
}

}  // namespace

void load_params(ad::ParamStore& store, const std::string& path) {
  nlohmann::json j = parse_checkpoint(path);
  const auto& params = j.at("params");
  if (static_cast<int>(params.size()) != store.size())
    throw IntegrityError("checkpoint '" + path + "' has " + std::to_string(params.size()) +
                         " parameters, expected " + std::to_string(store.size()));

  std::vector<double> payload;
  for (int i = 0; i < store.size(); ++i) {
    auto& e = store.entries()[static_cast<std::size_t>(i)];
    const auto& p = params[static_cast<std::size_t>(i)];
    if (p.at("name").get<std::string>() != e.name)
      throw IntegrityError("checkpoint parameter order mismatch: expected '" + e.name +
                           "', found '" + p.at("name").get<std::string>() + "'");
    long rows = p.at("shape").at(0).get<long>();
    long cols = p.at("shape").at(1).get<long>();
    if (rows != e.value.rows() || cols != e.value.cols())
      throw IntegrityError("checkpoint shape mismatch for '" + e.name + "'");
    const auto& data = p.at("data");
    if (static_cast<long>(data.size()) != rows * cols)
      throw IntegrityError("checkpoint data length mismatch for '" + e.name + "'");
    long k = 0;
    for (long r = 0; r < rows; ++r)
      for (long c = 0; c < cols; ++c) {
        double v = data[static_cast<std::size_t>(k++)].get<double>();
        e.value(r, c) = v;
        payload.push_back(v);
      }
  }
  std::string expect = j.value("checksum", "");
  if (expect != to_hex(payload_checksum(payload)))
    throw IntegrityError("checkpoint checksum mismatch in '" + path + "'");
  store.reset_momentum();
}

std::vector<std::string> checkpoint_param_names(const std::string& path) {
  nlohmann::json j = parse_checkpoint(path);
  std::vector<std::string> names;
  for (const auto& p : j.at("params")) names.push_back(p.at("name").get<std::string>());
  return names;
}

}  // namespace dadapt
