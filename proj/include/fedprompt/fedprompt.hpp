//
// Copyright 2026 The FedPrompt Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//

#pragma once

#include "fedprompt/autodiff.hpp"
#include "fedprompt/ccmp.hpp"
#include "fedprompt/client.hpp"
#include "fedprompt/data.hpp"
#include "fedprompt/errors.hpp"
#include "fedprompt/eval.hpp"
#include "fedprompt/experiment.hpp"
#include "fedprompt/federation.hpp"
#include "fedprompt/finite_diff.hpp"
#include "fedprompt/model.hpp"
#include "fedprompt/parallel.hpp"
#include "fedprompt/random.hpp"
#include "fedprompt/tensor.hpp"
