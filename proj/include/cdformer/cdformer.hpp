/*
 * Copyright (c) 2026 The cdformer Authors
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
#pragma once

// Umbrella header.

#include "cdformer/errors.hpp"
#include "cdformer/runtime.hpp"
#include "cdformer/tensor.hpp"
#include "cdformer/ops.hpp"
#include "cdformer/serialize.hpp"
#include "cdformer/geometry.hpp"
#include "cdformer/attention.hpp"
#include "cdformer/params.hpp"
#include "cdformer/config.hpp"
#include "cdformer/model.hpp"
#include "cdformer/data.hpp"
#include "cdformer/training.hpp"
#include "cdformer/bench.hpp"
#include "cdformer/grad_check.hpp"
