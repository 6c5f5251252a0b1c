"""WTForms schemas for JSON configuration files and fusion plans.

A JSON document is flattened into form data with "-" joining nested keys and
list indices (`{"train": {"steps": 5}}` becomes `train-steps`), which is the
naming FormField and FieldList already use. Values arrive as strings, so the
fields do the type coercion and every violation is collected in one pass.
"""

import dataclasses
import json

from wtforms import (BooleanField, FieldList, FloatField, Form, FormField, IntegerField,
                     SelectField, StringField)
from wtforms.validators import AnyOf, InputRequired, NumberRange, Optional, ValidationError

from adapters import LIDB_DEFAULT_A, LIDB_DEFAULT_B, AdapterKind, AdapterSpec
from containers import SCHEMA_VERSION, read_json
from errors import ConfigError
from experiments import RankRecoveryExperiment, SubspaceExperiment
from fusion import POLICIES
from linalg import ColumnSelect
from training import OPTIMIZERS, TrainConfig

FUSION_METHODS = ("spectral", "fedavg", "gradient")


def _choices(values):
    return [(v, v) for v in values]


def positive(form, field):
    if field.data is not None and not field.data > 0:
        raise ValidationError("Must be positive.")


def _given(field):
    return bool(field.raw_data)


class DocumentData:
    """Read-only multidict view of a flattened JSON document."""

    def __init__(self, flat):
        self._flat = dict(flat)

    def __iter__(self):
        return iter(self._flat)

    def __len__(self):
        return len(self._flat)

    def __contains__(self, key):
        return key in self._flat

    def getlist(self, key):
        return [self._flat[key]] if key in self._flat else []


def _scalar(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return value
    return json.dumps(value)


def flatten(document, prefix=""):
    """{"a": {"b": [1, 2]}} -> {"a-b-0": "1", "a-b-1": "2"}; nulls are dropped."""

    flat = {}
    if isinstance(document, dict):
        items = document.items()
    else:
        items = enumerate(document)
    for key, value in items:
        name = f"{prefix}{key}"
        if isinstance(value, (dict, list)):
            flat.update(flatten(value, name + "-"))
        elif value is not None:
            flat[name] = _scalar(value)
    return flat


##############################################################################
# Building blocks


class ColumnsForm(Form):
    start = IntegerField("start", validators=[Optional(), NumberRange(min=0)])
    count = IntegerField("count", validators=[Optional(), NumberRange(min=0)])
    indices = FieldList(IntegerField("index", validators=[InputRequired(), NumberRange(min=0)]))

    def validate(self, extra_validators=None):
        valid = super().validate(extra_validators)
        if (self.start.data is None) != (self.count.data is None):
            self.count.errors.append("start and count must be given together.")
            valid = False
        if self.indices.entries and self.start.data is not None:
            self.indices.errors.append("give either indices or start/count, not both.")
            valid = False
        return valid

    def to_columns(self):
        if self.indices.entries:
            return ColumnSelect.from_indices(self.indices.data)
        if self.start.data is None:
            return None
        return ColumnSelect(self.start.data, self.count.data)


class AdapterForm(Form):
    kind = SelectField("kind", choices=_choices([k.value for k in AdapterKind]), validators=[InputRequired()])
    rank = IntegerField("rank", default=1, validators=[NumberRange(min=0)])
    columns = FormField(ColumnsForm)
    alpha = FloatField("alpha", validators=[Optional(), positive])
    blocks = SelectField("blocks", choices=_choices(["shared", "independent"]), default="shared")
    variant = SelectField("variant", choices=_choices(["dora", "spectral"]), default="dora")
    aux_a = IntegerField("aux_a", default=LIDB_DEFAULT_A, validators=[NumberRange(min=1)])
    aux_b = IntegerField("aux_b", default=LIDB_DEFAULT_B, validators=[NumberRange(min=1)])

    def to_spec(self):
        kind = AdapterKind(self.kind.data)
        extras = {}
        if kind is AdapterKind.LORA and self.alpha.data is not None:
            extras["alpha"] = self.alpha.data
        elif kind is AdapterKind.OFT:
            extras["shared"] = self.blocks.data == "shared"
        elif kind is AdapterKind.LIDB:
            extras.update(aux_a=self.aux_a.data, aux_b=self.aux_b.data)
        elif kind is AdapterKind.DORA_VECTOR:
            extras["variant"] = self.variant.data
        return AdapterSpec(kind=kind, rank=self.rank.data, columns=self.columns.form.to_columns(),
                           extras=extras)


class TrainingForm(Form):
    """Optimizer settings; keys left out keep the caller's defaults."""

    optimizer = SelectField("optimizer", choices=_choices(OPTIMIZERS), default="AdamW",
                            validators=[Optional()])
    learning_rate = FloatField("learning_rate", validators=[Optional(), positive])
    steps = IntegerField("steps", validators=[Optional(), NumberRange(min=0)])
    batch_size = IntegerField("batch_size", validators=[Optional(), NumberRange(min=1)])
    seed = IntegerField("seed", validators=[Optional(), NumberRange(min=0)])
    weight_decay = FloatField("weight_decay", validators=[Optional(), NumberRange(min=0)])
    momentum = FloatField("momentum", validators=[Optional(), NumberRange(min=0, max=1)])
    line_search = BooleanField("line_search", validators=[Optional()])
    log_every = IntegerField("log_every", validators=[Optional(), NumberRange(min=1)])

    TRAIN_FIELDS = ("optimizer", "learning_rate", "steps", "batch_size", "seed", "weight_decay",
                    "momentum", "line_search", "log_every")

    def to_config(self, defaults, **overrides):
        given = {name: getattr(self, name).data for name in self.TRAIN_FIELDS if _given(getattr(self, name))}
        return dataclasses.replace(defaults, **{**overrides, **given})


class VersionedForm(Form):
    schema_version = IntegerField("schema_version",
                                  validators=[InputRequired(), AnyOf([SCHEMA_VERSION])])


##############################################################################
# Top-level documents


class TrainConfigForm(VersionedForm, TrainingForm):
    adapter = FormField(AdapterForm)
    n_samples = IntegerField("n_samples", default=64, validators=[NumberRange(min=1)])

    def to_config(self, seed=0):
        return super().to_config(TrainConfig(), seed=seed, adapter=self.adapter.form.to_spec())


class SubspaceExperimentForm(VersionedForm):
    n_samples = IntegerField("n_samples", validators=[Optional(), NumberRange(min=1)])
    hidden_dim = IntegerField("hidden_dim", validators=[Optional(), NumberRange(min=1)])
    weight_decay = FloatField("weight_decay", validators=[Optional(), NumberRange(min=0)])
    noise_scale = FloatField("noise_scale", validators=[Optional(), NumberRange(min=0)])
    seed = IntegerField("seed", validators=[Optional(), NumberRange(min=0)])
    train = FormField(TrainingForm)

    FIELDS = ("n_samples", "hidden_dim", "weight_decay", "noise_scale", "seed")

    def to_experiment(self, seed=0):
        defaults = SubspaceExperiment(seed=seed)
        given = {name: getattr(self, name).data for name in self.FIELDS if _given(getattr(self, name))}
        given["train"] = self.train.form.to_config(defaults.train, seed=given.get("seed", seed))
        return dataclasses.replace(defaults, **given)


class RankRecoveryExperimentForm(VersionedForm):
    n = IntegerField("n", validators=[Optional(), NumberRange(min=1)])
    m = IntegerField("m", validators=[Optional(), NumberRange(min=1)])
    rank = IntegerField("rank", validators=[Optional(), NumberRange(min=0)])
    seed = IntegerField("seed", validators=[Optional(), NumberRange(min=0)])
    n_samples = IntegerField("n_samples", validators=[Optional(), NumberRange(min=1)])
    singular_values = FieldList(FloatField("singular_value", validators=[InputRequired(), positive]))
    train = FormField(TrainingForm)

    FIELDS = ("n", "m", "rank", "seed", "n_samples")

    def to_experiment(self, seed=0):
        defaults = RankRecoveryExperiment(seed=seed)
        given = {name: getattr(self, name).data for name in self.FIELDS if _given(getattr(self, name))}
        if self.singular_values.entries:
            given["singular_values"] = tuple(self.singular_values.data)
        given["train"] = self.train.form.to_config(defaults.train, seed=given.get("seed", seed))
        return dataclasses.replace(defaults, **given)


class LossCompareExperimentForm(RankRecoveryExperimentForm):
    """Same problem as rank recovery; every kind is trained at a matched budget."""


class FusionEntryForm(Form):
    adapter = StringField("adapter", validators=[InputRequired()])
    weight = FloatField("lambda", name="lambda", validators=[Optional()])
    columns = FormField(ColumnsForm)
    activations = StringField("activations", validators=[Optional()])
    probes = StringField("probes", validators=[Optional()])


class FusionPlanForm(VersionedForm):
    base = StringField("base", validators=[InputRequired()])
    policy = SelectField("policy", choices=_choices(POLICIES), default="explicit")
    method = SelectField("method", choices=_choices(FUSION_METHODS), default="spectral")
    ridge = FloatField("ridge", validators=[Optional(), NumberRange(min=0)])
    entries = FieldList(FormField(FusionEntryForm))

    def validate_entries(self, field):
        if not field.entries:
            raise ValidationError("a fusion plan needs at least one entry.")


##############################################################################
# Validation


def _walk(form):
    """Yield every leaf field of `form`, descending into FormField and FieldList."""

    for field in form:
        if isinstance(field, FormField):
            yield from _walk(field.form)
        elif isinstance(field, FieldList):
            yield field
            for entry in field.entries:
                if isinstance(entry, FormField):
                    yield from _walk(entry.form)
                else:
                    yield entry
        else:
            yield field


def validate_document(form_cls, document, source="config"):
    """Validate a parsed JSON document; raise ConfigError listing every violation."""

    if not isinstance(document, dict):
        raise ConfigError([f"{source}: top level must be a JSON object"])
    flat = flatten(document)
    form = form_cls(formdata=DocumentData(flat))
    form.validate()

    violations = []
    known = set()
    for field in _walk(form):
        if not isinstance(field, FieldList):
            known.add(field.name)
        errors = field.errors if isinstance(field.errors, list) else []
        violations.extend(f"{field.name}: {error}" for error in errors if isinstance(error, str))
    violations.extend(f"{key}: unknown key" for key in flat if key not in known)
    if violations:
        raise ConfigError(violations)
    return form


def load_document(form_cls, path):
    return validate_document(form_cls, read_json(path), source=str(path))
