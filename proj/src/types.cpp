#include "uigr/types.hpp"

#include <string>

#include "uigr/error.hpp"

namespace uigr {

std::string_view to_string(Task task) { return task == Task::Tgr ? "TGR" : "VCR"; }

std::string_view to_string(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

Task parse_task(std::string_view text) {
  if (text == "TGR" || text == "tgr") return Task::Tgr;
  if (text == "VCR" || text == "vcr") return Task::Vcr;
  throw ParseError("unknown task '" + std::string(text) + "' (expected TGR or VCR)");
}

Split parse_split(std::string_view text) {
  if (text == "train") return Split::Train;
  if (text == "val") return Split::Val;
  if (text == "test") return Split::Test;
  throw ParseError("unknown split '" + std::string(text) + "' (expected train, val or test)");
}

}  // namespace uigr
