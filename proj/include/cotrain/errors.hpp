/*
 * Copyright 2026 The cotrain Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#ifndef COTRAIN_ERRORS_HPP
#define COTRAIN_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace cotrain {

// Error taxonomy mapped to CLI exit codes: config=2, data=3, train/eval=4.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct EvalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace cotrain

#endif  // COTRAIN_ERRORS_HPP
