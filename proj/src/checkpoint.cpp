#include "congeal/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <vector>

#include "congeal/report.hpp"

namespace congeal {

namespace {

enum class Kind : std::uint8_t { Text = 0, F32 = 1 };

struct Section {
  std::string name;
  Kind kind = Kind::Text;
  std::string text;
  std::vector<float> values;
};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t crc(const std::string& bytes, std::size_t begin, std::size_t end) {
  uLong c = crc32(0L, Z_NULL, 0);
  c = crc32(c, reinterpret_cast<const Bytef*>(bytes.data() + begin), static_cast<uInt>(end - begin));
  return static_cast<std::uint32_t>(c);
}

void encode_section(std::string& out, const Section& s) {
  const std::size_t start = out.size();
  put_u32(out, static_cast<std::uint32_t>(s.name.size()));
  out += s.name;
  out.push_back(static_cast<char>(s.kind));
  if (s.kind == Kind::Text) {
    put_u64(out, s.text.size());
    out += s.text;
  } else {
    put_u64(out, s.values.size());
    for (float f : s.values) put_u32(out, std::bit_cast<std::uint32_t>(f));
  }
  put_u32(out, crc(out, start, out.size()));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}
  bool done() const { return pos_ == bytes_.size(); }
  std::size_t pos() const { return pos_; }
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }
  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

Section decode_section(Reader& r, const std::string& bytes) {
  const std::size_t start = r.pos();
  Section s;
  const std::uint32_t name_len = r.u32();
  if (name_len > 4096) throw CheckpointError("checkpoint section name too long");
  s.name = r.take(name_len);
  const std::uint8_t kind = r.u8();
  if (kind > 1) throw CheckpointError("checkpoint section '" + s.name + "' has unknown kind");
  s.kind = static_cast<Kind>(kind);
  const std::uint64_t count = r.u64();
  if (s.kind == Kind::Text) {
    if (count > bytes.size()) throw CheckpointError("checkpoint section '" + s.name + "' length exceeds file");
    s.text = r.take(count);
  } else {
    if (count > bytes.size() / 4) throw CheckpointError("checkpoint section '" + s.name + "' length exceeds file");
    r.need(count * 4);
    s.values.resize(count);
    for (auto& f : s.values) f = std::bit_cast<float>(r.u32());
  }
  const std::uint32_t expect = crc(bytes, start, r.pos());
  if (r.u32() != expect) throw CheckpointError("checkpoint section '" + s.name + "' failed its checksum");
  return s;
}

std::string map_text(const std::map<std::string, std::string>& m) {
  std::string out;
  for (const auto& [k, v] : m) out += k + "=" + v + "\n";
  return out;
}

std::map<std::string, std::string> text_map(const std::string& text) {
  std::map<std::string, std::string> m;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CheckpointError("bad checkpoint line '" + line + "'");
    m[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return m;
}

std::string state_text(const TrainState& s, std::int64_t adam_step) {
  std::map<std::string, std::string> m;
  m["epoch"] = std::to_string(s.epoch);
  m["best_apsnr"] = format_double(s.best_apsnr);
  m["since_best"] = std::to_string(s.since_best);
  m["stopped_early"] = s.stopped_early ? "1" : "0";
  m["adam_step"] = std::to_string(adam_step);
  m["history"] = std::to_string(s.history.size());
  for (std::size_t i = 0; i < s.history.size(); ++i) m["history." + std::to_string(i)] = format_epoch(s.history[i]);
  return map_text(m);
}

const std::map<std::string, std::string>::mapped_type& require(const std::map<std::string, std::string>& m,
                                                               const std::string& key) {
  const auto it = m.find(key);
  if (it == m.end()) throw CheckpointError("checkpoint state lacks '" + key + "'");
  return it->second;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelState<float>& model, const Tensor<float>& reference,
                     const CongealConfig& config, const TrainState& state) {
  std::vector<Section> sections;
  sections.push_back({"spec", Kind::Text, model.spec().serialize(), {}});
  sections.push_back({"config", Kind::Text, map_text(config.to_map()), {}});
  sections.push_back({"state", Kind::Text, state_text(state, model.adam.step), {}});
  sections.push_back({"rng", Kind::Text, state.rng, {}});
  sections.push_back({"reference", Kind::F32, {}, reference.values()});
  const auto& params = model.params();
  const bool moments = model.adam.m.size() == params.size();
  for (std::size_t i = 0; i < params.size(); ++i) {
    sections.push_back({"param/" + params[i].name, Kind::F32, {}, params[i].tensor.values()});
    if (moments) {
      sections.push_back({"adam.m/" + params[i].name, Kind::F32, {}, model.adam.m[i]});
      sections.push_back({"adam.v/" + params[i].name, Kind::F32, {}, model.adam.v[i]});
    }
  }
  std::string bytes = "DPRC";
  put_u32(bytes, kCheckpointVersion);
  put_u32(bytes, static_cast<std::uint32_t>(sections.size()));
  for (const auto& s : sections) encode_section(bytes, s);

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw CheckpointError("failed writing checkpoint " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError("cannot move checkpoint into place at " + path + ": " + ec.message());
}

CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(bytes);
  if (r.take(std::min<std::size_t>(4, bytes.size())) != "DPRC") throw CheckpointError("bad magic in " + path);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint32_t count = r.u32();
  std::map<std::string, Section> sections;
  for (std::uint32_t i = 0; i < count; ++i) {
    Section s = decode_section(r, bytes);
    if (sections.count(s.name)) throw CheckpointError("duplicate checkpoint section '" + s.name + "'");
    sections.emplace(s.name, std::move(s));
  }
  if (!r.done()) throw CheckpointError("trailing bytes after the last checkpoint section");

  const auto section = [&](const std::string& name, Kind kind) -> const Section& {
    const auto it = sections.find(name);
    if (it == sections.end()) throw CheckpointError("checkpoint lacks section '" + name + "'");
    if (it->second.kind != kind) throw CheckpointError("checkpoint section '" + name + "' has the wrong kind");
    return it->second;
  };

  NetworkSpec spec;
  CongealConfig config;
  try {
    spec = NetworkSpec::deserialize(section("spec", Kind::Text).text);
    config = CongealConfig::from_map(text_map(section("config", Kind::Text).text));
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint metadata is invalid: ") + e.what());
  }
  CheckpointData data{ModelState<float>(spec, 0), Tensor<float>(spec.image_shape()), config, {}};

  const auto state = text_map(section("state", Kind::Text).text);
  std::int64_t adam_step = 0;
  try {
    data.state.epoch = std::stoi(require(state, "epoch"));
    data.state.best_apsnr = parse_double(require(state, "best_apsnr"));
    data.state.since_best = std::stoi(require(state, "since_best"));
    data.state.stopped_early = require(state, "stopped_early") == "1";
    adam_step = std::stoll(require(state, "adam_step"));
    const int history = std::stoi(require(state, "history"));
    for (int i = 0; i < history; ++i) data.state.history.push_back(parse_epoch(require(state, "history." + std::to_string(i))));
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint state is invalid: ") + e.what());
  }
  data.state.rng = section("rng", Kind::Text).text;

  const auto fill = [&](const std::string& name, std::vector<float>& dst) {
    const Section& s = section(name, Kind::F32);
    if (s.values.size() != dst.size()) {
      throw CheckpointError("checkpoint section '" + name + "' holds " + std::to_string(s.values.size()) +
                            " values, expected " + std::to_string(dst.size()));
    }
    dst = s.values;
  };
  fill("reference", data.reference.values());
  auto& params = data.model.params();
  const bool moments = sections.count("adam.m/" + params.front().name) != 0;
  data.model.adam.hyper.lr = config.lr;
  data.model.adam.step = adam_step;
  for (auto& p : params) {
    fill("param/" + p.name, p.tensor.values());
    if (moments) {
      data.model.adam.m.emplace_back(p.tensor.size());
      data.model.adam.v.emplace_back(p.tensor.size());
      fill("adam.m/" + p.name, data.model.adam.m.back());
      fill("adam.v/" + p.name, data.model.adam.v.back());
    }
  }
  const std::size_t expected = 5 + params.size() * (moments ? 3 : 1);
  if (sections.size() != expected) throw CheckpointError("checkpoint has unexpected extra sections");
  return data;
}

}  // namespace congeal
