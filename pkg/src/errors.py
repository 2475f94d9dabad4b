"""
例外類型
"""


class RelCueError(Exception):
    """所有工具錯誤的根類型"""


class ConfigError(RelCueError, ValueError):
    """配置錯誤，訊息中包含出錯的欄位名稱"""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class DataError(RelCueError, ValueError):
    """輸入資料錯誤（音檔、清單、嵌入檔案等）"""
