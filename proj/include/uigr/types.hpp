#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

namespace uigr {

// Branch index order matches the classifier outputs: logit 0 is VCR, logit 1 is TGR.
enum class Task : std::uint8_t { Vcr = 0, Tgr = 1 };

enum class Split : std::uint8_t { Train = 0, Val = 1, Test = 2 };

inline constexpr std::array<Split, 3> kAllSplits{Split::Train, Split::Val, Split::Test};
inline constexpr std::array<Task, 2> kAllTasks{Task::Tgr, Task::Vcr};

std::string_view to_string(Task task);
std::string_view to_string(Split split);
Task parse_task(std::string_view text);
Split parse_split(std::string_view text);

}  // namespace uigr
