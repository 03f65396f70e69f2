#pragma once

#include <cstdint>
#include <string>
#include <unordered_set>
#include <vector>

#include "looprec/binary_io.hpp"
#include "looprec/common.hpp"
#include "looprec/config.hpp"
#include "looprec/model.hpp"
#include "looprec/optim.hpp"

namespace looprec {

inline constexpr uint32_t kCheckpointVersion = 1;

struct CheckpointInfo {
  Config config;
  std::string config_text;
  int64_t step = 0;
  bool has_optimizer = false;
};

namespace detail {

template <typename T>
void write_blob(ByteWriter& w, const std::vector<T>& vals) {
  w.bytes(vals.data(), vals.size() * sizeof(T));
}

template <typename T>
void read_blob(ByteReader& r, std::vector<T>& vals, size_t n, const char* what) {
  vals.resize(n);
  r.bytes(vals.data(), n * sizeof(T), what);
}

}  // namespace detail

// Checkpoint layout: "DJVC" magic, u32 version, then length-prefixed sections
// in fixed order: CONF (config text), STEP (train step), one PARM per
// parameter in store order, then optionally OPTS (optimizer step) and one
// OPTM per parameter with Adam moments.
template <typename T>
void save_checkpoint(const std::string& path, const Config& cfg, int64_t step,
                     const ParamStore<T>& params, const AdamW<T>* opt = nullptr) {
  ByteWriter w;
  w.tag("DJVC");
  w.u32(kCheckpointVersion);

  {
    std::string text = config_text(cfg);
    w.tag("CONF");
    w.u64(text.size());
    w.bytes(text.data(), text.size());
  }
  {
    w.tag("STEP");
    w.u64(8);
    w.u64((uint64_t)step);
  }
  for (const auto& [name, t] : params.items()) {
    ByteWriter p;
    p.str(name);
    p.u8((uint8_t)sizeof(T));
    const auto& shape = t.shape();
    p.u32((uint32_t)shape.size());
    for (int64_t d : shape) p.u64((uint64_t)d);
    detail::write_blob(p, t.values());
    w.tag("PARM");
    w.u64(p.size());
    w.bytes(p.data().data(), p.size());
  }
  if (opt) {
    w.tag("OPTS");
    w.u64(8);
    w.u64((uint64_t)opt->steps_taken());
    for (const auto& slot : opt->slots()) {
      ByteWriter p;
      p.str(slot.name);
      p.u64(slot.m.size());
      detail::write_blob(p, slot.m);
      detail::write_blob(p, slot.v);
      w.tag("OPTM");
      w.u64(p.size());
      w.bytes(p.data().data(), p.size());
    }
  }
  w.save(path);
}

inline CheckpointInfo read_checkpoint_header(const std::string& path) {
  ByteReader r = ByteReader::from_file(path);
  std::string magic = r.tag4("magic");
  check(magic == "DJVC", cat(path, ": bad magic '", magic, "' (expected DJVC)"));
  uint32_t version = r.u32("version");
  check(version == kCheckpointVersion,
        cat(path, ": unsupported checkpoint version ", version));
  std::string tag = r.tag4();
  check(tag == "CONF", cat(path, ": expected CONF section first, found '", tag, "'"));
  uint64_t len = r.u64("CONF length");
  std::vector<char> text((size_t)len);
  r.bytes(text.data(), (size_t)len, "CONF payload");
  CheckpointInfo info;
  info.config_text.assign(text.begin(), text.end());
  info.config = parse_config_text(info.config_text, path + ":CONF");
  tag = r.tag4();
  check(tag == "STEP", cat(path, ": expected STEP section, found '", tag, "'"));
  check(r.u64("STEP length") == 8, cat(path, ": bad STEP section length"));
  info.step = (int64_t)r.u64("STEP payload");
  return info;
}

// Load parameters (and optionally Adam moments) into an existing store.
// With allow_missing, store parameters absent from the file keep their
// current values (used to bootstrap the stage-2 head from a stage-1 file).
template <typename T>
CheckpointInfo load_checkpoint(const std::string& path, ParamStore<T>& params,
                               AdamW<T>* opt = nullptr, bool allow_missing = false) {
  ByteReader r = ByteReader::from_file(path);
  std::string magic = r.tag4("magic");
  check(magic == "DJVC", cat(path, ": bad magic '", magic, "' (expected DJVC)"));
  uint32_t version = r.u32("version");
  check(version == kCheckpointVersion,
        cat(path, ": unsupported checkpoint version ", version));

  CheckpointInfo info;
  std::unordered_set<std::string> seen_params, seen_moments;
  int phase = 0;  // 0: expect CONF, 1: expect STEP, 2: PARM..., 3: OPTM...
  while (!r.eof()) {
    std::string tag = r.tag4();
    uint64_t len = r.u64(cat(tag, " length").c_str());
    size_t start = r.pos();
    if (tag == "CONF") {
      check(phase == 0, cat(path, ": unexpected CONF section"));
      std::vector<char> text((size_t)len);
      r.bytes(text.data(), (size_t)len, "CONF payload");
      info.config_text.assign(text.begin(), text.end());
      info.config = parse_config_text(info.config_text, path + ":CONF");
      phase = 1;
    } else if (tag == "STEP") {
      check(phase == 1, cat(path, ": unexpected STEP section"));
      check(len == 8, cat(path, ": bad STEP section length"));
      info.step = (int64_t)r.u64("STEP payload");
      phase = 2;
    } else if (tag == "PARM") {
      check(phase == 2, cat(path, ": unexpected PARM section"));
      std::string name = r.str("parameter name");
      uint8_t dtype = r.u8("parameter dtype");
      check(dtype == sizeof(T), cat(path, ": parameter '", name, "' stores ", (int)dtype,
                                    "-byte scalars but ", sizeof(T), "-byte were requested"));
      uint32_t rank = r.u32("parameter rank");
      Shape shape;
      for (uint32_t i = 0; i < rank; ++i) shape.push_back((int64_t)r.u64("parameter dim"));
      check(params.has(name), cat(path, ": checkpoint parameter '", name,
                                  "' does not exist in this model"));
      Tensor<T>& t = params.at(name);
      check(t.shape() == shape, cat(path, ": parameter '", name, "' shape mismatch"));
      check(!seen_params.count(name), cat(path, ": duplicate parameter '", name, "'"));
      detail::read_blob(r, t.mut_values(), (size_t)t.numel(),
                        cat("parameter '", name, "' payload").c_str());
      seen_params.insert(name);
    } else if (tag == "OPTS") {
      check(phase == 2, cat(path, ": unexpected OPTS section"));
      check(len == 8, cat(path, ": bad OPTS section length"));
      uint64_t t = r.u64("OPTS payload");
      if (opt) opt->set_steps_taken((int64_t)t);
      info.has_optimizer = true;
      phase = 3;
    } else if (tag == "OPTM") {
      check(phase == 3, cat(path, ": unexpected OPTM section"));
      std::string name = r.str("moment name");
      uint64_t n = r.u64("moment element count");
      check(!seen_moments.count(name), cat(path, ": duplicate moments for '", name, "'"));
      seen_moments.insert(name);
      if (opt) {
        typename AdamW<T>::Slot* slot = nullptr;
        for (auto& s : opt->slots())
          if (s.name == name) slot = &s;
        check(slot != nullptr, cat(path, ": moments for unknown parameter '", name, "'"));
        check((int64_t)n == slot->param.numel(),
              cat(path, ": moment size mismatch for '", name, "'"));
        detail::read_blob(r, slot->m, (size_t)n, "first moment payload");
        detail::read_blob(r, slot->v, (size_t)n, "second moment payload");
      } else {
        std::vector<T> skip;
        detail::read_blob(r, skip, (size_t)n, "first moment payload");
        detail::read_blob(r, skip, (size_t)n, "second moment payload");
      }
    } else {
      fail(cat(path, ": unknown section '", tag, "' at byte offset ", start - 12));
    }
    check(r.pos() - start == len, cat(path, ": section '", tag, "' length mismatch (header says ",
                                      len, ", parsed ", r.pos() - start, ")"));
  }
  check(phase >= 2, cat(path, ": missing CONF/STEP sections"));
  if (!allow_missing)
    for (const auto& [name, t] : params.items())
      check(seen_params.count(name) != 0,
            cat(path, ": checkpoint is missing parameter '", name, "'"));
  if (opt) {
    check(info.has_optimizer, cat(path, ": checkpoint has no optimizer state"));
    for (const auto& s : opt->slots())
      check(seen_moments.count(s.name) != 0 || !seen_params.count(s.name),
            cat(path, ": checkpoint is missing moments for '", s.name, "'"));
  }
  return info;
}

}  // namespace looprec
